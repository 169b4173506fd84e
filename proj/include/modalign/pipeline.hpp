#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "modalign/backend.hpp"
#include "modalign/corpus.hpp"
#include "modalign/evalkit.hpp"
#include "modalign/hyperparams.hpp"
#include "modalign/prefdata.hpp"

namespace modalign {

struct ModelSpec {
    std::string name;
    /// Hyperparameter family ("t5", "llama"); derived from the name when empty.
    std::string family;
};

struct SubsampleConfig {
    bool enabled = true;
    int at_k = 256;
    std::vector<int> k_primes{128, 192};
};

/// Declarative description of a sweep. JSON form:
///
///     {
///       "task": "hatexplain",                 built-in key or task JSON path
///       "dataset": "posts.jsonl",             or "splits": {"train", "val", "test"}
///       "explanations": "seed.jsonl",         optional
///       "split_seed": 0,
///       "models": [{"name": "flan-t5-large", "family": "t5"}, ...],
///       "k_schedule": [16, 32, 64, 128, 256],
///       "alignment_method": "DPO",
///       "k_check": 128,
///       "metric": "macro_f1",
///       "seeds": {"sampling": 0, "generation": 0},
///       "auxiliary_sft": "hatecot.jsonl",     optional
///       "subsample": {"enabled": true, "at_k": 256, "k_primes": [128, 192]},
///       "eval": {"k_val": 50, "k_test": 400},  defaults from the task
///       "backend": {"kind": "mock", "state_dir": "..."},
///       "runs_dir": "runs",
///       "parallel_cells": 1
///     }
struct RunConfig {
    std::string task = "hatexplain";
    std::optional<std::filesystem::path> dataset;
    std::optional<std::filesystem::path> explanations;
    struct SplitFiles {
        std::filesystem::path train, val, test;
    };
    std::optional<SplitFiles> splits;
    std::uint64_t split_seed = 0;

    std::vector<ModelSpec> models;
    std::vector<int> k_schedule;
    TrainingMethod alignment_method = TrainingMethod::DPO;
    std::optional<int> k_check;
    std::string metric = "macro_f1";
    std::uint64_t sampling_seed = 0;
    std::uint64_t generation_seed = 0;
    std::optional<std::filesystem::path> auxiliary_sft;
    SubsampleConfig subsample;
    std::optional<int> k_val;
    std::optional<int> k_test;

    std::string backend = "mock";
    std::optional<std::filesystem::path> backend_state_dir;
    std::optional<std::filesystem::path> runs_dir;
    std::size_t parallel_cells = 1;

    /// Throws InvalidConfig.
    void validate() const;
    /// Additionally requires two models and k_check.
    void validate_stage2() const;

    std::string family_of(const ModelSpec& model) const;

    json to_json() const;
    /// Relative paths are resolved against `base_dir`. Throws InvalidConfig.
    static RunConfig from_json(const json& doc, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
    std::string digest() const;
};

/// Task profile and split a run works on.
struct RunInputs {
    TaskProfile task;
    DatasetSplit split;
    std::vector<SftRecord> auxiliary;
};

/// Loads the task, dataset (split with split_seed) or explicit split files,
/// seed explanations and the auxiliary corpus named by the config.
RunInputs load_inputs(const RunConfig& config);

struct StepRecord {
    std::string stage;
    std::string dataset_digest;
    std::size_t records = 0;
    Hyperparameters hyperparameters;
    ModelRef model;
    std::optional<EvalReport> val;
    std::string started_at;
    std::string finished_at;

    json to_json() const;
};

enum class CellStatus { Succeeded, Failed };
std::string_view to_string(CellStatus status);

struct CellRecord {
    /// "aux", "stage1" or "stage2".
    std::string stage;
    std::string model;
    /// Stage 2: the model whose explanations were used.
    std::optional<std::string> partner;
    int k = 0;
    /// "SFT", "DPO", "KTO", "DPO-K128", "DPO-N192", "XDPO", ...
    std::string variant;
    std::size_t model_order = 0;
    CellStatus status = CellStatus::Succeeded;
    std::string error;
    std::vector<StepRecord> steps;
    std::optional<EvalReport> val;
    std::optional<EvalReport> test;
    std::vector<std::string> pool_ids;

    bool succeeded() const noexcept { return status == CellStatus::Succeeded; }
    /// Model produced by the last step, if any.
    const ModelRef* final_model() const;
    json to_json() const;
};

/// Append-only log of a run. Appends from concurrent cells are serialized.
class RunRecord {
public:
    RunRecord() = default;
    RunRecord(std::string run_id, std::string config_digest);
    RunRecord(const RunRecord& other);
    RunRecord& operator=(const RunRecord& other);

    const std::string& run_id() const noexcept { return run_id_; }
    const std::string& config_digest() const noexcept { return config_digest_; }
    const std::string& created_at() const noexcept { return created_at_; }

    void append(CellRecord cell);
    /// Snapshot of the cells in canonical order (stage, K, model order, variant order).
    std::vector<CellRecord> cells() const;
    std::size_t failed_count() const;

    /// Successful stage-1 cell for (model, K, variant), if any.
    std::optional<CellRecord> find(std::string_view stage, std::string_view model, int k,
                                   std::string_view variant) const;

    json to_json() const;
    static RunRecord from_json(const json& doc);
    /// Writes <dir>/manifest.json.
    void write_manifest(const std::filesystem::path& dir) const;

private:
    std::string run_id_;
    std::string config_digest_;
    std::string created_at_;
    mutable std::mutex mutex_;
    std::vector<CellRecord> cells_;
};

/// Stage 1: for each K in the schedule and each model, SFT on the K-shot
/// seed-explanation records, self-augment with conditioned explanations,
/// align with DPO or KTO, and evaluate on the validation subset. A failing
/// (model, K) cell is recorded as FAILED and the sweep continues.
RunRecord run_stage1(const RunConfig& config, const RunInputs& inputs, Backend& backend,
                     const HyperparameterRegistry& registry = HyperparameterRegistry::published());

/// Stage 2: for each ordered pair (a, b), SFT a's stage-1 checkpoint at
/// k_check on b's gold-conditioned explanations over the complementary
/// shots, then DPO self-augment on the same shots and evaluate on the test
/// subset. Throws MissingCheckpoint when a stage-1 checkpoint is absent.
RunRecord run_stage2(const RunConfig& config, const RunInputs& inputs, Backend& backend, const RunRecord& stage1,
                     const HyperparameterRegistry& registry = HyperparameterRegistry::published());

/// Classifies `examples` with `model` and scores the parsed labels.
EvalReport evaluate_model(Backend& backend, const ModelRef& model, const std::vector<LabeledExample>& examples,
                          const LabelSpace& space, const GenerationOptions& options = {});

struct PairedExplanation {
    LabeledExample example;
    ConditionedExplanation a;
    ConditionedExplanation b;
};

struct LabelConsistentSamples {
    std::vector<PairedExplanation> samples;
    std::size_t total = 0;

    std::size_t retained() const noexcept { return samples.size(); }
    double rate() const noexcept { return total == 0 ? 0.0 : static_cast<double>(samples.size()) / static_cast<double>(total); }
};

/// Keeps the examples for which both models' gold-conditioned completions
/// parse to the gold label.
LabelConsistentSamples collect_label_consistent(Backend& backend, const ModelRef& model_a, const ModelRef& model_b,
                                                const std::vector<LabeledExample>& pool, const LabelSpace& space,
                                                const GenerationOptions& options = {});

enum class SelectionSplit { Val, Test };

/// Best successful cell by `metric` ("macro_f1" or "accuracy"); ties go to
/// the smaller K, then the earlier model. Throws NoSuccessfulCell.
const CellRecord& select_best_cell(std::span<const CellRecord> cells, std::string_view metric = "macro_f1",
                                   SelectionSplit split = SelectionSplit::Val);
ModelRef select_best(const RunRecord& record, std::string_view metric = "macro_f1",
                     SelectionSplit split = SelectionSplit::Val);

}  // namespace modalign
