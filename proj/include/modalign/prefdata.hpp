#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "modalign/backend.hpp"
#include "modalign/corpus.hpp"
#include "modalign/prompting.hpp"

namespace modalign {

struct ConditionedExplanation {
    std::string completion;
    ParsedResponse parsed;
};

/// One post with a completion per conditioned label, indexed like the label space.
struct ConditionedPost {
    LabeledExample example;
    /// Classification prompt of the post; the prompt side of every training record.
    std::string prompt;
    std::size_t gold_index = 0;
    std::vector<std::optional<ConditionedExplanation>> by_label;

    const ConditionedExplanation* find(std::size_t label_index) const {
        return label_index < by_label.size() && by_label[label_index] ? &*by_label[label_index] : nullptr;
    }
};

struct ConditionedExplanationSet {
    LabelSpace space;
    std::vector<ConditionedPost> posts;

    /// Every post has an entry for every label.
    bool complete() const;
    const ConditionedPost* find(std::string_view post_id) const;
};

struct PreferencePair {
    std::string prompt;
    std::string chosen;
    std::string rejected;
    std::string post_id;
    std::string rejected_label;
};

struct ListwiseRecord {
    std::string prompt;
    std::string completion;
    bool desirable = false;
    std::string post_id;
    std::string conditioned_label;
};

struct GenerationOptions {
    int max_new_tokens = 512;
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

/// Asks `model` to justify every label of the space for every example, so
/// the set holds |examples| x |S| completions. GenerationFailed is rethrown
/// naming the post and label.
ConditionedExplanationSet generate_conditioned_explanations(Backend& backend, const ModelRef& model,
                                                            const std::vector<LabeledExample>& examples,
                                                            const LabelSpace& space,
                                                            const GenerationOptions& options = {});

/// Gold-label completions only (one entry per post).
ConditionedExplanationSet generate_gold_explanations(Backend& backend, const ModelRef& model,
                                                     const std::vector<LabeledExample>& examples,
                                                     const LabelSpace& space, const GenerationOptions& options = {});

/// The gold-conditioned completion, rewritten as "EXPLANATION: ...\nLABEL: <gold>"
/// when the model's own label disagrees with gold or cannot be parsed.
std::string chosen_completion(const ConditionedPost& post);

/// Per post, (|S|-1) pairs: the gold-conditioned completion against each
/// incorrect-label completion in label-space order. Throws IncompleteSet.
std::vector<PreferencePair> build_dpo_pairs(const ConditionedExplanationSet& cset);

/// Per post, |S| records; only the gold-conditioned one is desirable.
/// Throws IncompleteSet.
std::vector<ListwiseRecord> build_kto_records(const ConditionedExplanationSet& cset);

/// DPO-K: k_prime posts per class drawn uniformly from the pool, with all
/// their pairs; k_prime * |S| * (|S|-1) pairs in total. Throws ClassExhausted
/// when a class of the pool has fewer than k_prime posts.
std::vector<PreferencePair> subsample_dpo_k(const ShotPool& pool, int k_prime, std::uint64_t seed,
                                            const ConditionedExplanationSet& cset);

/// DPO-N: k_prime * |S| * (|S|-1) distinct (post, incorrect label)
/// combinations drawn uniformly without replacement from the whole pool.
/// Throws RequestTooLarge when more combinations are requested than exist.
std::vector<PreferencePair> subsample_dpo_n(const ShotPool& pool, int k_prime, std::uint64_t seed,
                                            const ConditionedExplanationSet& cset);

using TrainingRecord = std::variant<SftRecord, PreferencePair, ListwiseRecord>;

/// JSON-lines training files. DPO lines carry prompt, chosen, rejected; KTO
/// lines prompt, completion, label (bool); SFT lines prompt, completion.
TrainingData serialize(std::span<const SftRecord> records);
TrainingData serialize(std::span<const PreferencePair> records);
TrainingData serialize(std::span<const ListwiseRecord> records);
/// Throws MixedMethods when the records are not all of one kind.
TrainingData serialize(std::span<const TrainingRecord> records);

/// Inverse of serialize for the serialized fields; post ids and labels are
/// not part of the file and come back empty.
std::vector<TrainingRecord> deserialize(const TrainingData& data);

/// Sidecar describing how a training file was produced.
json dataset_manifest(const TrainingData& data, std::string_view variant, const ShotPool& pool,
                      std::optional<int> k_prime, std::size_t posts);

}  // namespace modalign
