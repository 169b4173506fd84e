#pragma once

#include <array>
#include <chrono>
#include <optional>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <unistd.h>

#include "modalign/corpus.hpp"
#include "modalign/evalkit.hpp"
#include "modalign/pipeline.hpp"
#include "modalign/prefdata.hpp"
#include "modalign/prompting.hpp"
#include "modalign/rng.hpp"

namespace modalign::testing {

inline LabelSpace make_space(std::size_t n, std::string task = "Synthetic") {
    std::vector<LabelDefinition> labels;
    for (std::size_t i = 0; i < n; ++i) {
        labels.push_back({"L" + std::to_string(i), "definition of class " + std::to_string(i) + "."});
    }
    return LabelSpace(std::move(task), std::move(labels));
}

inline LabeledExample make_example(std::string id, std::string label, bool with_explanation = true) {
    LabeledExample ex;
    ex.post.id = id;
    ex.post.text = "post " + id + " about the weather";
    ex.gold_label = std::move(label);
    if (with_explanation) ex.seed_explanation = "The post " + id + " fits its label.";
    return ex;
}

/// per_class examples per label with ids "<prefix><label>-<i>".
inline std::vector<LabeledExample> make_examples(const LabelSpace& space, std::size_t per_class,
                                                 const std::string& prefix = "p") {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < per_class; ++i) {
        for (const auto& name : space.names()) {
            out.push_back(make_example(prefix + name + "-" + std::to_string(i), name));
        }
    }
    return out;
}

inline DatasetSplit make_split(const LabelSpace& space, std::size_t train_pc, std::size_t val_pc,
                               std::size_t test_pc) {
    DatasetSplit split;
    split.train = make_examples(space, train_pc, "tr");
    split.val = make_examples(space, val_pc, "va");
    split.test = make_examples(space, test_pc, "te");
    return split;
}

inline std::string synthetic_explanation(const LabeledExample& ex, std::string_view label) {
    return "The post " + ex.post.id + " reads as " + std::string(label) + ".";
}

/// Complete conditioned set whose completions all parse to their conditioned label.
inline ConditionedExplanationSet make_cset(const LabelSpace& space, const std::vector<LabeledExample>& examples) {
    ConditionedExplanationSet cset{space, {}};
    for (const auto& ex : examples) {
        ConditionedPost post;
        post.example = ex;
        post.prompt = render_classification_prompt(ex.post, space).text;
        post.gold_index = *space.index_of(ex.gold_label);
        for (const auto& name : space.names()) {
            ConditionedExplanation ce;
            ce.completion = format_completion(synthetic_explanation(ex, name), name);
            ce.parsed = parse_response(ce.completion, space);
            post.by_label.emplace_back(std::move(ce));
        }
        cset.posts.push_back(std::move(post));
    }
    return cset;
}

inline ShotPool make_pool(const std::vector<LabeledExample>& examples, int k) {
    ShotPool pool;
    pool.k = k;
    pool.examples = examples;
    return pool;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "modalign-tests" /
                     (name + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline RunConfig mock_config(std::vector<int> k_schedule, std::vector<std::string> models = {"flan-t5-large", "llama-3-8b"}) {
    RunConfig config;
    config.task = "hatexplain";
    for (auto& m : models) config.models.push_back({m, ""});
    config.k_schedule = std::move(k_schedule);
    config.subsample.enabled = false;
    config.k_val = 10;
    config.k_test = 10;
    return config;
}

inline RunInputs mock_inputs(std::size_t train_pc = 64, std::size_t eval_pc = 20) {
    auto task = builtin_task("hatexplain");
    auto split = make_split(task.space, train_pc, eval_pc, eval_pc);
    return RunInputs{task, std::move(split), {}};
}

/// Synthetic explanation in one of two separable styles; both share a topic vocabulary.
inline std::vector<std::string> style_texts(int style, std::size_t n, std::uint64_t seed) {
    static const std::vector<std::string> topic{"post", "group", "label", "target", "people", "language", "definition"};
    static const std::vector<std::string> formal{"therefore", "consequently", "furthermore", "explicitly",
                                                 "demonstrates", "constitutes", "regarding", "moreover"};
    static const std::vector<std::string> casual{"basically", "kinda", "just", "like", "pretty", "obviously",
                                                 "gonna", "stuff"};
    const auto& marker = style == 0 ? formal : casual;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(style) + 1));
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::string text;
        const auto words = 12 + rng.below(8);
        for (std::uint64_t w = 0; w < words; ++w) {
            const bool use_marker = rng.uniform() < 0.35;
            const auto& pool = use_marker ? marker : topic;
            if (!text.empty()) text += ' ';
            text += pool[rng.below(pool.size())];
        }
        out.push_back(std::move(text));
    }
    return out;
}

/// Per-class (precision, recall, f1) and macro-F1 from an explicit confusion
/// matrix with an extra column for unparseable predictions.
struct OracleScores {
    std::vector<std::array<double, 3>> per_class;
    double macro_f1 = 0.0;
    double accuracy = 0.0;
};

inline OracleScores oracle_score(const std::vector<std::size_t>& gold, const std::vector<std::optional<std::size_t>>& pred,
                                 std::size_t n_labels) {
    std::vector<std::vector<std::size_t>> confusion(n_labels, std::vector<std::size_t>(n_labels + 1, 0));
    for (std::size_t i = 0; i < gold.size(); ++i) ++confusion[gold[i]][pred[i] ? *pred[i] : n_labels];
    OracleScores out;
    std::size_t correct = 0;
    for (std::size_t c = 0; c < n_labels; ++c) {
        const double tp = static_cast<double>(confusion[c][c]);
        double row = 0.0;
        double col = 0.0;
        for (std::size_t j = 0; j <= n_labels; ++j) row += static_cast<double>(confusion[c][j]);
        for (std::size_t g = 0; g < n_labels; ++g) col += static_cast<double>(confusion[g][c]);
        const double precision = col == 0.0 ? 0.0 : tp / col;
        const double recall = row == 0.0 ? 0.0 : tp / row;
        const double f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
        out.per_class.push_back({precision, recall, f1});
        out.macro_f1 += f1 / static_cast<double>(n_labels);
        correct += confusion[c][c];
    }
    out.accuracy = gold.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(gold.size());
    return out;
}

/// Completion parsing to `label`, or an unparseable one for nullopt.
inline ParsedResponse response_for(const LabelSpace& space, std::optional<std::size_t> label) {
    return parse_response(label ? format_completion("because", space.name_at(*label)) : "no idea", space);
}

struct SyntheticVotes {
    std::vector<Vote> votes;
    std::map<std::string, std::string> gold;
};

/// Per label, wins[label] = {wins of model_a, wins of model_b}; each winning
/// sample gets three votes (2-1 or 3-0) and each tied sample two split votes.
inline SyntheticVotes synthetic_votes(const LabelSpace& space, const std::vector<std::pair<std::size_t, std::size_t>>& wins,
                                      std::size_t ties, const std::string& model_a, const std::string& model_b) {
    SyntheticVotes out;
    std::size_t next = 0;
    auto add_sample = [&](const std::string& label, std::vector<std::string> choices) {
        const auto id = "s" + std::to_string(next++);
        out.gold[id] = label;
        for (std::size_t v = 0; v < choices.size(); ++v) {
            out.votes.push_back({id, "ann" + std::to_string(v), choices[v]});
        }
    };
    for (std::size_t l = 0; l < wins.size(); ++l) {
        const auto& label = space.name_at(l);
        for (std::size_t i = 0; i < wins[l].first; ++i) {
            add_sample(label, i % 2 ? std::vector<std::string>{model_a, model_b, model_a}
                                    : std::vector<std::string>{model_a, model_a, model_a});
        }
        for (std::size_t i = 0; i < wins[l].second; ++i) {
            add_sample(label, i % 2 ? std::vector<std::string>{model_b, model_a, model_b}
                                    : std::vector<std::string>{model_b, model_b, model_b});
        }
    }
    for (std::size_t t = 0; t < ties; ++t) add_sample(space.name_at(t % space.size()), {model_a, model_b});
    return out;
}

struct RegistrySpotCheck {
    const char* task;
    const char* model;
    int k;
    const char* technique;
    int epochs;
    double learning_rate;
};

inline constexpr RegistrySpotCheck kRegistrySpotChecks[] = {
    {"HateXplain", "Llama", 256, "KTO", 3, 5e-07},
    {"Implicit Hate", "T5", 128, "DPO", 1, 7e-05},
    {"HateXplain", "T5", 16, "DPO", 3, 5e-05},
    {"HateXplain", "Llama", 32, "DPO", 4, 1e-05},
    {"HateXplain", "T5", 256, "DPO", 4, 1e-04},
    {"HateXplain", "Llama", 256, "DPO-K192", 1, 7e-05},
    {"HateXplain", "Llama", 256, "DPO-N128", 5, 5e-06},
    {"Latent Hate", "Llama", 16, "DPO", 3, 1e-06},
    {"Latent Hate", "T5", 128, "DPO", 4, 5e-05},
    {"Latent Hate", "Llama", 256, "DPO-N192", 5, 1e-04},
    {"Latent Hate", "T5", 256, "DPO-K128", 4, 1e-04},
    {"Implicit Hate", "Llama", 32, "DPO", 4, 5e-05},
    {"Implicit Hate", "Llama", 256, "DPO", 1, 5e-05},
    {"Implicit Hate", "T5", 256, "DPO-N192", 1, 7e-05},
    {"Implicit Hate", "Llama", 256, "DPO-K128", 1, 1e-05},
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace modalign::testing
