#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "modalign/jsonl.hpp"
#include "modalign/pipeline.hpp"

namespace modalign {

/// Guidance shown with every item. Annotators make one pairwise choice.
extern const std::string_view kAnnotationCriteria;

/// A label-consistent pair of explanations for one post. The model names
/// are provenance and stay on the server.
struct AnnotationSample {
    std::string sample_id;
    std::string post;
    std::string gold_label;
    std::string model_a;
    std::string explanation_a;
    std::string model_b;
    std::string explanation_b;

    json to_json() const;
    static AnnotationSample from_json(const json& doc);
};

/// Turns collected samples into annotation samples; ids are the post ids.
std::vector<AnnotationSample> annotation_samples(const LabelConsistentSamples& samples, std::string_view model_a,
                                                 std::string_view model_b);

struct AnnotatorProfile {
    std::string annotator_id;
    /// Optional: gender, age band, race/ethnicity, country, education.
    std::map<std::string, std::string> demographics;
};

enum class Choice { First, Second };
std::string_view to_string(Choice choice);
/// "FIRST"/"SECOND" (any case) or "1"/"2"; throws std::invalid_argument.
Choice parse_choice(std::string_view text);

struct AnnotationItem {
    std::string batch_id;
    std::string sample_id;
    std::string post;
    std::string gold_label;
    std::string explanation_first;
    std::string explanation_second;
    std::string criteria;
    /// True when the first explanation is model B's. Never sent to clients.
    bool order_flip = false;

    /// Client payload: no order_flip, no model names.
    json client_json() const;
};

struct ServeResult {
    std::optional<AnnotationItem> item;
    std::size_t answered = 0;
    std::size_t assigned = 0;

    bool done() const noexcept { return !item; }
    json client_json() const;
};

struct StoredVote {
    std::string batch_id;
    std::string sample_id;
    std::string annotator_id;
    Choice choice = Choice::First;
    std::string resolved_model;
    std::string gold_label;
    std::string timestamp;
    std::uint64_t seq = 0;

    json to_json() const;
    static StoredVote from_json(const json& doc);
};

enum class ExportFormat { Jsonl, Csv };

struct BatchStatus {
    std::string batch_id;
    std::size_t items = 0;
    int assignments_per_item = 0;
    std::size_t claimed = 0;
    std::size_t votes = 0;

    bool complete() const noexcept { return votes == items * static_cast<std::size_t>(assignments_per_item); }
};

/// Assigns items to annotators, serves them in a randomized order and
/// records pairwise preferences.
///
/// Each item has assignments_per_item slots. A slot is bound to an annotator
/// the first time the item is served to them; the item is drawn uniformly at
/// random among items with a free slot that the annotator has not seen. An
/// annotator with an unanswered item is served that item again.
///
/// With a data directory, every state change is appended to log.jsonl
/// before it is applied and a full snapshot.json is written every
/// snapshot_every events; a new service on the same directory resumes.
class AnnotationService {
public:
    struct Options {
        std::uint64_t seed = 0;
        std::optional<std::filesystem::path> data_dir;
        std::size_t snapshot_every = 256;
        /// Cap on items served to one annotator across all batches.
        std::optional<std::size_t> max_items_per_annotator;
        /// ISO-8601 timestamp source; defaults to the system clock (UTC, ms).
        std::function<std::string()> clock;
    };

    AnnotationService() : AnnotationService(Options{}) {}
    explicit AnnotationService(Options options);
    ~AnnotationService();

    AnnotationService(const AnnotationService&) = delete;
    AnnotationService& operator=(const AnnotationService&) = delete;

    /// MODALIGN_SERVICE_SEED and MODALIGN_DATA_DIR, both optional.
    static Options options_from_environment();

    /// Throws EmptyBatch for no samples, InvalidConfig for a non-positive
    /// assignment count or duplicate sample ids.
    std::string create_batch(std::vector<AnnotationSample> samples, int assignments_per_item = 3);

    /// Registers (or re-registers) an annotator; an empty id is generated.
    std::string register_annotator(AnnotatorProfile profile);

    /// Throws UnknownAnnotator.
    ServeResult serve_next(const std::string& annotator_id);

    /// Throws UnknownAnnotator, NotAssigned (the item was never served to
    /// this annotator) or DuplicateVote.
    StoredVote submit_vote(const std::string& annotator_id, const std::string& sample_id, Choice choice);

    /// Votes of a batch ordered by (sample_id, timestamp). Throws UnknownBatch.
    std::vector<StoredVote> votes(const std::string& batch_id) const;
    std::string export_votes(const std::string& batch_id, ExportFormat format = ExportFormat::Jsonl) const;
    /// sample id -> gold label. Throws UnknownBatch.
    std::map<std::string, std::string> gold_labels(const std::string& batch_id) const;
    std::vector<std::string> batch_ids() const;
    BatchStatus status(const std::string& batch_id) const;
    /// Counts per demographic key and value; never tied to votes.
    json demographics_summary() const;

    /// Deterministic per (seed, sample, annotator).
    static bool order_flip(std::uint64_t seed, std::string_view sample_id, std::string_view annotator_id);

    void snapshot();

private:
    struct Item {
        AnnotationSample sample;
        std::vector<std::string> assignees;
    };
    struct Batch {
        std::string id;
        int assignments_per_item = 3;
        std::vector<Item> items;
        std::map<std::string, std::size_t> index;
    };
    struct Claim {
        std::size_t batch = 0;
        std::size_t item = 0;
        bool answered = false;
    };
    struct Annotator {
        AnnotatorProfile profile;
        std::vector<Claim> claims;
    };

    void record(json event);
    void apply(const json& event);
    json state_json() const;
    void load_state(const json& state);
    void replay();
    AnnotationItem make_item(const Batch& batch, const Item& item, const std::string& annotator_id) const;
    const Batch& batch_or_throw(const std::string& batch_id) const;

    Options options_;
    mutable std::mutex mutex_;
    std::vector<Batch> batches_;
    std::map<std::string, Annotator> annotators_;
    std::vector<StoredVote> votes_;
    std::uint64_t seq_ = 0;
    std::uint64_t events_since_snapshot_ = 0;
    std::ofstream log_;
};

/// HTTP front end (JSON bodies, CORS enabled):
///
///     POST /annotators          {"annotator_id"?, "demographics"?} -> {"annotator_id"}
///     GET  /next?annotator=ID   -> item payload or {"status": "DONE"}
///     POST /votes               {"annotator_id", "sample_id", "choice"} -> {"status": "recorded"}
///     GET  /export?batch=ID[&format=csv]
class AnnotationServer {
public:
    explicit AnnotationServer(AnnotationService& service);
    ~AnnotationServer();

    /// Binds to an ephemeral port and returns it, or -1.
    int bind_any_port(const std::string& host = "127.0.0.1");
    bool bind(const std::string& host, int port);
    /// Blocks until stop().
    bool listen_after_bind();
    void stop();
    void wait_until_ready() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace modalign
