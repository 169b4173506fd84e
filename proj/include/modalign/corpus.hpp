#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "modalign/jsonl.hpp"

namespace modalign {

struct LabelDefinition {
    std::string name;
    std::string definition;
};

/// Ordered label set of a task with one definition per label.
class LabelSpace {
public:
    /// Throws InvalidLabelSpace if labels are empty, duplicated, or lack a definition.
    LabelSpace(std::string task_name, std::vector<LabelDefinition> labels);

    const std::string& task_name() const noexcept { return task_name_; }
    std::size_t size() const noexcept { return labels_.size(); }
    const std::vector<LabelDefinition>& entries() const noexcept { return labels_; }
    std::vector<std::string> names() const;

    const std::string& name_at(std::size_t i) const { return labels_.at(i).name; }
    std::optional<std::size_t> index_of(std::string_view label) const;
    bool contains(std::string_view label) const { return index_of(label).has_value(); }

    /// Throws UnknownLabel.
    const std::string& definition(std::string_view label) const;

    /// Exact name, or a case-insensitive match returning the canonical name.
    std::optional<std::string> canonical(std::string_view label) const;

    static LabelSpace from_json(const json& doc);
    json to_json() const;

private:
    std::string task_name_;
    std::vector<LabelDefinition> labels_;
};

struct SplitRatios {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

/// Label space plus the per-task split and evaluation sizes.
struct TaskProfile {
    LabelSpace space;
    SplitRatios ratios;
    int k_val = 50;
    int k_test = 400;
};

/// Built-in tasks: "hatexplain", "latent_hate", "implicit_hate" (display names
/// such as "Latent Hate" are accepted too). Throws UnknownLabel for other names.
TaskProfile builtin_task(std::string_view name);
std::vector<std::string> builtin_task_keys();
TaskProfile task_from_json(const json& doc);
/// A built-in key or a path to a task JSON file.
TaskProfile resolve_task(std::string_view name_or_path);

struct Post {
    std::string id;
    std::string text;
    std::optional<std::string> platform;
};

struct LabeledExample {
    Post post;
    std::string gold_label;
    std::optional<std::string> seed_explanation;
};

json to_json(const LabeledExample& example);
LabeledExample example_from_json(const json& row, const LabelSpace& space);

enum class SplitTag { Train, Val, Test };
std::string_view to_string(SplitTag tag);

struct DatasetSplit {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> val;
    std::vector<LabeledExample> test;
    SplitRatios ratios;
    std::uint64_t seed = 0;

    const std::vector<LabeledExample>& part(SplitTag tag) const;
};

enum class SamplingMode { Strict, Lenient };

/// K examples per label drawn from one split.
struct ShotPool {
    int k = 0;
    std::vector<LabeledExample> examples;
    SplitTag source_split = SplitTag::Train;
    std::uint64_t seed = 0;
    /// Labels that had fewer than k members (lenient mode only).
    std::vector<std::string> deficient_labels;

    bool deficient() const noexcept { return !deficient_labels.empty(); }
};

/// Replaces "@handle" tokens with "<user>", drops URLs and collapses whitespace.
std::string anonymize(std::string_view text);

/// JSON-lines with `id`, `text`, `label` and optional `explanation`/`platform`.
/// Throws MalformedRecord or UnknownLabel with the 1-based line number.
std::vector<LabeledExample> load_dataset(const std::filesystem::path& path, const LabelSpace& space);

/// Fills `seed_explanation` from a JSON-lines file of {"id", "explanation"}.
/// Returns how many examples received an explanation.
std::size_t attach_explanations(std::vector<LabeledExample>& examples, const std::filesystem::path& path);

/// Stratified, seeded split. Throws BadRatios unless the ratios are
/// non-negative and sum to 1 within 1e-9.
DatasetSplit split_dataset(const std::vector<LabeledExample>& examples, const LabelSpace& space,
                           const SplitRatios& ratios, std::uint64_t seed);

/// Target split sizes for n items by largest remainder.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios);

/// Uniform per-class sample without replacement. For a fixed seed the
/// pools for increasing k are nested: each class is permuted once and the
/// pool takes its first k members.
ShotPool sample_k_shot(const std::vector<LabeledExample>& source, SplitTag tag, const LabelSpace& space, int k,
                       std::uint64_t seed, SamplingMode mode = SamplingMode::Strict);
ShotPool sample_k_shot(const DatasetSplit& split, const LabelSpace& space, int k, std::uint64_t seed,
                       SamplingMode mode = SamplingMode::Strict);

/// The next k members per class after the first k under the same seed, i.e.
/// the pool of size 2k minus the pool of size k.
ShotPool sample_complementary(const DatasetSplit& split, const LabelSpace& space, int k, std::uint64_t seed,
                              SamplingMode mode = SamplingMode::Strict);

/// Evaluation-only subset from the validation or test split. Sampling from
/// the training split is rejected with InvalidConfig.
std::vector<LabeledExample> sample_eval_subset(const DatasetSplit& split, SplitTag tag, const LabelSpace& space,
                                               int k_per_class, std::uint64_t seed,
                                               SamplingMode mode = SamplingMode::Strict);

std::vector<json> to_json(const std::vector<LabeledExample>& examples);

}  // namespace modalign
