#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "modalign/jsonl.hpp"
#include "modalign/prompting.hpp"

namespace modalign {

enum class TrainingMethod { SFT, DPO, KTO };
std::string_view to_string(TrainingMethod method);
/// Accepts "sft", "dpo", "kto" in any case; throws InvalidTrainingSpec.
TrainingMethod parse_training_method(std::string_view text);

/// LoRA adapter settings used for every fine-tuning run.
struct AdapterConfig {
    int rank = 64;
    int alpha = 128;
    double dropout = 0.05;
    std::vector<std::string> target_modules{"q_proj", "v_proj"};
};

struct TrainingSpec {
    TrainingMethod method = TrainingMethod::SFT;
    int epochs = 3;
    double learning_rate = 3e-4;
    /// Required for DPO and KTO, absent for SFT.
    std::optional<double> beta;
    AdapterConfig adapter;
    std::string loss_variant;

    /// Defaults for a method: SFT 3 epochs at 3e-4; DPO sigmoid loss and
    /// KTO loss with beta 0.1. Epochs/LR for alignment come from the registry.
    static TrainingSpec defaults(TrainingMethod method);

    /// Throws InvalidTrainingSpec.
    void validate() const;
    json to_json() const;
    static TrainingSpec from_json(const json& doc);
    std::string digest() const;
};

enum class BackendKind { Mock, External };
std::string_view to_string(BackendKind kind);

struct LineageEntry {
    std::string stage;
    std::string spec_digest;
    std::string data_digest;

    bool operator==(const LineageEntry&) const = default;
};

/// A model as the sequence of trainings applied to a named base.
/// ModelRefs are values: training returns a new one and never touches its input.
struct ModelRef {
    std::string name;
    std::vector<LineageEntry> lineage;
    BackendKind backend_kind = BackendKind::Mock;
    /// Opaque checkpoint identifier returned by an external trainer.
    std::optional<std::string> checkpoint;

    std::vector<std::string> stages() const;
    json to_json() const;
    static ModelRef from_json(const json& doc);
    /// SHA-256 of the canonical JSON form.
    std::string digest() const;

    bool operator==(const ModelRef&) const = default;
};

/// A serialized training file: JSON-lines in the format of `method`.
struct TrainingData {
    TrainingMethod method = TrainingMethod::SFT;
    std::string jsonl;

    std::string digest() const;
};

/// Throws FormatMismatch unless every line has exactly the fields of `method`
/// (SFT: prompt, completion; DPO: prompt, chosen, rejected; KTO: prompt,
/// completion, label with a boolean label).
std::vector<json> parse_training_data(const TrainingData& data);

struct GenerationRequest {
    std::vector<RenderedPrompt> prompts;
    int max_new_tokens = 512;
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

class Backend {
public:
    virtual ~Backend() = default;

    /// One completion per prompt, in request order. Throws BackendUnavailable
    /// (retryable) or GenerationFailed carrying the prompt index.
    virtual std::vector<std::string> generate(const ModelRef& model, const GenerationRequest& request) = 0;

    /// Returns `model` with its lineage extended by (stage, spec, data).
    /// Throws FormatMismatch when the data does not match spec.method.
    virtual ModelRef train(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                           std::string_view stage) = 0;

    /// Upper bound on concurrent generate calls callers may issue.
    virtual std::size_t max_in_flight() const = 0;
    virtual BackendKind kind() const = 0;

    ModelRef base_model(std::string name) const { return ModelRef{std::move(name), {}, kind(), std::nullopt}; }
};

/// Splits the request into chunks and keeps at most backend.max_in_flight()
/// generate calls running at once. Output order matches request order; a
/// GenerationFailed from any chunk is rethrown with its index in the full request.
std::vector<std::string> generate_bounded(Backend& backend, const ModelRef& model, const GenerationRequest& request,
                                          std::size_t chunk_size = 32);

/// Deterministic stand-in for a real LLM. A model is the prompt->completion
/// table produced by replaying its lineage: SFT binds every record, DPO binds
/// the chosen completion (overriding earlier bindings) and KTO binds only
/// desirable completions. Unseen prompts get
///
///     EXPLANATION: fallback. LABEL: <first label of the Definitions block>
///
/// The table is kept in memory and, when a state directory is given, also
/// written there so that separate processes can share trained models.
class MockBackend final : public Backend {
public:
    struct Options {
        std::optional<std::filesystem::path> state_dir;
        std::size_t max_in_flight = 8;
    };

    MockBackend() : MockBackend(Options{}) {}
    explicit MockBackend(Options options);

    std::vector<std::string> generate(const ModelRef& model, const GenerationRequest& request) override;
    ModelRef train(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                   std::string_view stage) override;
    std::size_t max_in_flight() const override { return options_.max_in_flight; }
    BackendKind kind() const override { return BackendKind::Mock; }

    /// Generation for models named `name` fails at the first prompt.
    void inject_generation_failure(std::string name);
    /// Training of models named `name` reports the backend as unavailable.
    void inject_training_failure(std::string name);

    static std::string fallback_completion(std::string_view prompt);

private:
    using Table = std::unordered_map<std::string, std::string>;

    std::shared_ptr<const Table> table_for(const ModelRef& model);

    Options options_;
    std::mutex mutex_;
    std::unordered_map<std::string, std::shared_ptr<const Table>> tables_;
    std::set<std::string> failing_generation_;
    std::set<std::string> failing_training_;
};

/// Delegates to an external trainer and inference server.
///
/// Training uses a filesystem handoff under `root`:
///
///     jobs/<id>/spec.json    written here: training spec, base model, stage
///     jobs/<id>/data.jsonl   written here: the training file
///     jobs/<id>/result.json  written by the trainer:
///                            {"status": "succeeded"|"failed", "checkpoint": "...", "message": "..."}
///
/// The job id is derived from (base model, spec, data), so an interrupted
/// sweep picks up finished jobs. Generation is a POST of
/// {"model", "prompts", "max_new_tokens", "temperature", "seed"} to
/// `<endpoint>/generate`, answered with {"completions": [...]}.
class ExternalBackend final : public Backend {
public:
    struct Options {
        std::filesystem::path root;
        std::string endpoint;
        std::size_t max_in_flight = 4;
        std::size_t batch_size = 64;
        std::chrono::milliseconds poll_interval{200};
        std::chrono::milliseconds train_timeout{std::chrono::hours(48)};
    };

    explicit ExternalBackend(Options options);

    /// Reads MODALIGN_ADAPTER_ROOT and MODALIGN_ADAPTER_ENDPOINT; throws
    /// BackendUnavailable when either is unset.
    static ExternalBackend from_environment();

    std::vector<std::string> generate(const ModelRef& model, const GenerationRequest& request) override;
    ModelRef train(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                   std::string_view stage) override;
    std::size_t max_in_flight() const override { return options_.max_in_flight; }
    BackendKind kind() const override { return BackendKind::External; }

    static std::string job_id(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                              std::string_view stage);

private:
    Options options_;
};

}  // namespace modalign
