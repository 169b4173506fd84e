#include "modalign/text_classifier.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_map>

#include "modalign/error.hpp"
#include "modalign/rng.hpp"

namespace modalign {

namespace {

using Features = std::vector<std::pair<std::size_t, double>>;

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c >= 0x80 || c == '\'') {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
            if (std::ispunct(c)) tokens.emplace_back(1, static_cast<char>(c));
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

Features featurize(std::string_view text, std::size_t buckets) {
    const auto tokens = tokenize(text);
    std::unordered_map<std::size_t, double> counts;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        counts[fnv1a(tokens[i]) % buckets] += 1.0;
        if (i + 1 < tokens.size()) counts[fnv1a(tokens[i + 1], fnv1a(tokens[i]) ^ 0x2f) % buckets] += 1.0;
    }
    Features out(counts.begin(), counts.end());
    std::sort(out.begin(), out.end());
    double norm = 0.0;
    for (auto& [_, v] : out) {
        v = std::log1p(v);
        norm += v * v;
    }
    if (norm > 0.0) {
        norm = std::sqrt(norm);
        for (auto& [_, v] : out) v /= norm;
    }
    return out;
}

void softmax_inplace(std::vector<double>& z) {
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (auto& v : z) {
        v = std::exp(v - m);
        sum += v;
    }
    for (auto& v : z) v /= sum;
}

}  // namespace

std::vector<double> TextClassifier::distribution(std::string_view text) const {
    const auto features = featurize(text, buckets_);
    const auto n = classes_.size();
    std::vector<double> z(bias_);
    for (const auto& [idx, value] : features) {
        const double* row = &weights_[idx * n];
        for (std::size_t c = 0; c < n; ++c) z[c] += row[c] * value;
    }
    softmax_inplace(z);
    return z;
}

std::vector<std::vector<double>> TextClassifier::classify(std::span<const std::string> texts) const {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& text : texts) out.push_back(distribution(text));
    return out;
}

const std::string& TextClassifier::predict(std::string_view text) const {
    const auto dist = distribution(text);
    return classes_[static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin())];
}

json TextClassifier::to_json() const {
    // sparse: only non-zero weight rows
    json rows = json::object();
    const auto n = classes_.size();
    for (std::size_t b = 0; b < buckets_; ++b) {
        const double* row = &weights_[b * n];
        if (std::any_of(row, row + n, [](double w) { return w != 0.0; })) {
            rows[std::to_string(b)] = std::vector<double>(row, row + n);
        }
    }
    return {{"classes", classes_}, {"buckets", buckets_}, {"bias", bias_}, {"weights", rows}};
}

TextClassifier TextClassifier::from_json(const json& doc) {
    TextClassifier clf;
    clf.classes_ = doc.at("classes").get<std::vector<std::string>>();
    clf.buckets_ = doc.at("buckets").get<std::size_t>();
    clf.bias_ = doc.at("bias").get<std::vector<double>>();
    const auto n = clf.classes_.size();
    clf.weights_.assign(clf.buckets_ * n, 0.0);
    for (const auto& [key, row] : doc.at("weights").items()) {
        const auto b = std::stoull(key);
        const auto values = row.get<std::vector<double>>();
        std::copy(values.begin(), values.end(), clf.weights_.begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return clf;
}

TextClassifier train_text_classifier(std::span<const LabeledCorpus> corpora, const ClassifierSpec& spec) {
    if (corpora.size() < 2) throw EmptyCorpus("need at least two classes");
    for (const auto& corpus : corpora) {
        if (corpus.texts.empty()) throw EmptyCorpus("class '" + corpus.label + "' has no texts");
    }
    TextClassifier clf;
    const auto n = corpora.size();
    clf.buckets_ = std::max<std::size_t>(spec.buckets, 16);
    clf.weights_.assign(clf.buckets_ * n, 0.0);
    clf.bias_.assign(n, 0.0);
    for (const auto& corpus : corpora) clf.classes_.push_back(corpus.label);

    std::vector<std::pair<Features, std::size_t>> samples;
    for (std::size_t c = 0; c < n; ++c) {
        for (const auto& text : corpora[c].texts) samples.emplace_back(featurize(text, clf.buckets_), c);
    }

    Rng rng(spec.seed);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> z(n);
    for (int epoch = 0; epoch < spec.epochs; ++epoch) {
        rng.shuffle(order);
        const double lr = spec.learning_rate / (1.0 + 0.5 * epoch);
        for (const auto i : order) {
            const auto& [features, target] = samples[i];
            z = clf.bias_;
            for (const auto& [idx, value] : features) {
                const double* row = &clf.weights_[idx * n];
                for (std::size_t c = 0; c < n; ++c) z[c] += row[c] * value;
            }
            softmax_inplace(z);
            for (std::size_t c = 0; c < n; ++c) {
                const double grad = z[c] - (c == target ? 1.0 : 0.0);
                clf.bias_[c] -= lr * grad;
                for (const auto& [idx, value] : features) {
                    double& w = clf.weights_[idx * n + c];
                    w -= lr * (grad * value + spec.l2 * w);
                }
            }
        }
    }
    return clf;
}

TextClassifier train_text_classifier(const std::vector<std::string>& texts_a, const std::vector<std::string>& texts_b,
                                     const ClassifierSpec& spec, std::string name_a, std::string name_b) {
    const LabeledCorpus corpora[] = {{std::move(name_a), texts_a}, {std::move(name_b), texts_b}};
    return train_text_classifier(std::span<const LabeledCorpus>(corpora), spec);
}

}  // namespace modalign
