#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modalign/jsonl.hpp"

namespace modalign {

struct ClassifierSpec {
    int epochs = 20;
    double learning_rate = 0.5;
    double l2 = 1e-5;
    /// Number of hashed feature buckets (unigrams + bigrams).
    std::size_t buckets = std::size_t{1} << 16;
    std::uint64_t seed = 0;
};

struct LabeledCorpus {
    std::string label;
    std::vector<std::string> texts;
};

/// Multinomial logistic regression over hashed lowercase unigram and bigram
/// counts. Serves both as the binary style classifier and as the
/// encoder-style full-data baseline; a fine-tuned transformer can replace it
/// behind the same interface.
class TextClassifier {
public:
    const std::vector<std::string>& classes() const noexcept { return classes_; }

    /// Probability distribution over classes() for one text.
    std::vector<double> distribution(std::string_view text) const;
    std::vector<std::vector<double>> classify(std::span<const std::string> texts) const;
    /// Most probable class; ties go to the earlier class.
    const std::string& predict(std::string_view text) const;

    json to_json() const;
    static TextClassifier from_json(const json& doc);

private:
    friend TextClassifier train_text_classifier(std::span<const LabeledCorpus>, const ClassifierSpec&);

    std::vector<std::string> classes_;
    std::size_t buckets_ = 0;
    std::vector<double> weights_;  // buckets_ x classes_ row-major
    std::vector<double> bias_;
};

/// Throws EmptyCorpus if fewer than two classes are given or any class has no text.
TextClassifier train_text_classifier(std::span<const LabeledCorpus> corpora, const ClassifierSpec& spec = {});

/// Binary form: class names default to "A" and "B".
TextClassifier train_text_classifier(const std::vector<std::string>& texts_a, const std::vector<std::string>& texts_b,
                                     const ClassifierSpec& spec = {}, std::string name_a = "A",
                                     std::string name_b = "B");

}  // namespace modalign
