#include "modalign/prefdata.hpp"

#include <algorithm>
#include <optional>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "modalign/error.hpp"
#include "modalign/rng.hpp"

namespace modalign {

namespace {

using ordered_json = nlohmann::ordered_json;

ConditionedExplanationSet generate_for(Backend& backend, const ModelRef& model,
                                       const std::vector<LabeledExample>& examples, const LabelSpace& space,
                                       const GenerationOptions& options, bool gold_only) {
    ConditionedExplanationSet cset{space, {}};
    cset.posts.reserve(examples.size());
    GenerationRequest request;
    request.max_new_tokens = options.max_new_tokens;
    request.temperature = options.temperature;
    request.seed = options.seed;
    std::vector<std::pair<std::size_t, std::size_t>> slots;  // (post, label)
    for (std::size_t p = 0; p < examples.size(); ++p) {
        const auto& ex = examples[p];
        const auto gold = space.index_of(ex.gold_label);
        if (!gold) throw UnknownLabel("label '" + ex.gold_label + "' of post " + ex.post.id);
        cset.posts.push_back({ex, render_classification_prompt(ex.post, space).text, *gold, {}});
        cset.posts.back().by_label.resize(space.size());
        for (std::size_t l = 0; l < space.size(); ++l) {
            if (gold_only && l != *gold) continue;
            request.prompts.push_back(render_conditional_prompt(ex.post, space, space.name_at(l)));
            slots.emplace_back(p, l);
        }
    }
    std::vector<std::string> completions;
    try {
        completions = generate_bounded(backend, model, request);
    } catch (const GenerationFailed& e) {
        if (e.index() < slots.size()) {
            const auto [p, l] = slots[e.index()];
            throw GenerationFailed(e.index(), "post " + examples[p].post.id + ", label " + space.name_at(l) + ": " +
                                                  e.what());
        }
        throw;
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const auto [p, l] = slots[i];
        cset.posts[p].by_label[l] = ConditionedExplanation{completions[i], parse_response(completions[i], space)};
    }
    return cset;
}

void require_complete(const ConditionedExplanationSet& cset, const ConditionedPost& post) {
    for (std::size_t l = 0; l < cset.space.size(); ++l) {
        if (!post.find(l)) {
            throw IncompleteSet("post " + post.example.post.id + " has no completion for label " +
                                cset.space.name_at(l));
        }
    }
}

void append_pairs(const ConditionedExplanationSet& cset, const ConditionedPost& post,
                  std::vector<PreferencePair>& out) {
    require_complete(cset, post);
    const auto gold = post.gold_index;
    const auto chosen = chosen_completion(post);
    for (std::size_t l = 0; l < cset.space.size(); ++l) {
        if (l == gold) continue;
        out.push_back({post.prompt, chosen, post.find(l)->completion, post.example.post.id, cset.space.name_at(l)});
    }
}

const ConditionedPost& require_post(const ConditionedExplanationSet& cset, const std::string& id) {
    const auto* post = cset.find(id);
    if (!post) throw IncompleteSet("no conditioned explanations for post " + id);
    return *post;
}

std::uint64_t subsample_stream(std::uint64_t seed, std::string_view variant, std::string_view label = {}) {
    return mix_seed(seed, fnv1a(label, fnv1a(variant)));
}

}  // namespace

bool ConditionedExplanationSet::complete() const {
    return std::all_of(posts.begin(), posts.end(), [&](const ConditionedPost& post) {
        for (std::size_t l = 0; l < space.size(); ++l) {
            if (!post.find(l)) return false;
        }
        return true;
    });
}

const ConditionedPost* ConditionedExplanationSet::find(std::string_view post_id) const {
    auto it = std::find_if(posts.begin(), posts.end(),
                           [&](const ConditionedPost& post) { return post.example.post.id == post_id; });
    return it == posts.end() ? nullptr : &*it;
}

ConditionedExplanationSet generate_conditioned_explanations(Backend& backend, const ModelRef& model,
                                                            const std::vector<LabeledExample>& examples,
                                                            const LabelSpace& space, const GenerationOptions& options) {
    return generate_for(backend, model, examples, space, options, false);
}

ConditionedExplanationSet generate_gold_explanations(Backend& backend, const ModelRef& model,
                                                     const std::vector<LabeledExample>& examples,
                                                     const LabelSpace& space, const GenerationOptions& options) {
    return generate_for(backend, model, examples, space, options, true);
}

std::string chosen_completion(const ConditionedPost& post) {
    const auto* gold = post.find(post.gold_index);
    if (!gold) throw IncompleteSet("post " + post.example.post.id + " has no gold-conditioned completion");
    if (gold->parsed.label == post.example.gold_label) return gold->completion;
    auto explanation = gold->parsed.explanation;
    if (explanation.empty()) {
        const auto first = gold->completion.find_first_not_of(" \t\r\n");
        const auto last = gold->completion.find_last_not_of(" \t\r\n");
        if (first != std::string::npos) explanation = gold->completion.substr(first, last - first + 1);
    }
    return format_completion(explanation, post.example.gold_label);
}

std::vector<PreferencePair> build_dpo_pairs(const ConditionedExplanationSet& cset) {
    std::vector<PreferencePair> out;
    out.reserve(cset.posts.size() * (cset.space.size() - 1));
    for (const auto& post : cset.posts) append_pairs(cset, post, out);
    return out;
}

std::vector<ListwiseRecord> build_kto_records(const ConditionedExplanationSet& cset) {
    std::vector<ListwiseRecord> out;
    out.reserve(cset.posts.size() * cset.space.size());
    for (const auto& post : cset.posts) {
        require_complete(cset, post);
        for (std::size_t l = 0; l < cset.space.size(); ++l) {
            const bool desirable = l == post.gold_index;
            out.push_back({post.prompt, desirable ? chosen_completion(post) : post.find(l)->completion, desirable,
                           post.example.post.id, cset.space.name_at(l)});
        }
    }
    return out;
}

std::vector<PreferencePair> subsample_dpo_k(const ShotPool& pool, int k_prime, std::uint64_t seed,
                                            const ConditionedExplanationSet& cset) {
    if (k_prime < 1) throw InvalidConfig("k_prime must be >= 1");
    const auto& space = cset.space;
    std::vector<std::vector<std::size_t>> by_class(space.size());
    for (std::size_t i = 0; i < pool.examples.size(); ++i) {
        const auto idx = space.index_of(pool.examples[i].gold_label);
        if (!idx) throw UnknownLabel("label '" + pool.examples[i].gold_label + "' is not in the label space");
        by_class[*idx].push_back(i);
    }
    const auto want = static_cast<std::size_t>(k_prime);
    std::vector<std::size_t> selected;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        if (by_class[c].size() < want) {
            throw ClassExhausted("label '" + space.name_at(c) + "' has " + std::to_string(by_class[c].size()) +
                                 " posts in the pool, need " + std::to_string(want));
        }
        Rng rng(subsample_stream(seed, "dpo-k", space.name_at(c)));
        const auto order = rng.permutation(by_class[c].size());
        for (std::size_t i = 0; i < want; ++i) selected.push_back(by_class[c][order[i]]);
    }
    std::sort(selected.begin(), selected.end());
    std::vector<PreferencePair> out;
    out.reserve(selected.size() * (space.size() - 1));
    for (const auto i : selected) append_pairs(cset, require_post(cset, pool.examples[i].post.id), out);
    return out;
}

std::vector<PreferencePair> subsample_dpo_n(const ShotPool& pool, int k_prime, std::uint64_t seed,
                                            const ConditionedExplanationSet& cset) {
    if (k_prime < 1) throw InvalidConfig("k_prime must be >= 1");
    const auto& space = cset.space;
    const auto per_post = space.size() - 1;
    const auto requested = static_cast<std::size_t>(k_prime) * space.size() * per_post;
    const auto available = pool.examples.size() * per_post;
    if (requested > available) {
        throw RequestTooLarge("requested " + std::to_string(requested) + " pairs but the pool has " +
                              std::to_string(available) + " post-label combinations");
    }
    // combination i -> (post i / per_post, i-th incorrect label of that post)
    Rng rng(subsample_stream(seed, "dpo-n"));
    std::vector<std::size_t> combos(available);
    for (std::size_t i = 0; i < available; ++i) combos[i] = i;
    for (std::size_t i = 0; i < requested; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(available - i));
        std::swap(combos[i], combos[j]);
    }
    combos.resize(requested);
    std::sort(combos.begin(), combos.end());

    std::vector<PreferencePair> out;
    out.reserve(requested);
    for (const auto combo : combos) {
        const auto& post = require_post(cset, pool.examples[combo / per_post].post.id);
        require_complete(cset, post);
        auto label = combo % per_post;
        if (label >= post.gold_index) ++label;
        out.push_back({post.prompt, chosen_completion(post), post.find(label)->completion, post.example.post.id,
                       space.name_at(label)});
    }
    return out;
}

TrainingData serialize(std::span<const SftRecord> records) {
    TrainingData data{TrainingMethod::SFT, {}};
    for (const auto& r : records) {
        ordered_json row;
        row["prompt"] = r.prompt;
        row["completion"] = r.completion;
        data.jsonl += row.dump();
        data.jsonl += '\n';
    }
    return data;
}

TrainingData serialize(std::span<const PreferencePair> records) {
    TrainingData data{TrainingMethod::DPO, {}};
    for (const auto& r : records) {
        ordered_json row;
        row["prompt"] = r.prompt;
        row["chosen"] = r.chosen;
        row["rejected"] = r.rejected;
        data.jsonl += row.dump();
        data.jsonl += '\n';
    }
    return data;
}

TrainingData serialize(std::span<const ListwiseRecord> records) {
    TrainingData data{TrainingMethod::KTO, {}};
    for (const auto& r : records) {
        ordered_json row;
        row["prompt"] = r.prompt;
        row["completion"] = r.completion;
        row["label"] = r.desirable;
        data.jsonl += row.dump();
        data.jsonl += '\n';
    }
    return data;
}

TrainingData serialize(std::span<const TrainingRecord> records) {
    if (records.empty()) return TrainingData{};
    const auto kind = records.front().index();
    if (std::any_of(records.begin(), records.end(), [&](const auto& r) { return r.index() != kind; })) {
        throw MixedMethods("training records mix SFT, DPO and KTO entries");
    }
    auto collect = [&]<typename T>(std::type_identity<T>) {
        std::vector<T> typed;
        typed.reserve(records.size());
        for (const auto& r : records) typed.push_back(std::get<T>(r));
        return serialize(std::span<const T>(typed));
    };
    switch (kind) {
        case 0: return collect(std::type_identity<SftRecord>{});
        case 1: return collect(std::type_identity<PreferencePair>{});
        default: return collect(std::type_identity<ListwiseRecord>{});
    }
}

std::vector<TrainingRecord> deserialize(const TrainingData& data) {
    std::vector<TrainingRecord> out;
    for (const auto& row : parse_training_data(data)) {
        switch (data.method) {
            case TrainingMethod::SFT:
                out.emplace_back(SftRecord{row.at("prompt").get<std::string>(), row.at("completion").get<std::string>()});
                break;
            case TrainingMethod::DPO:
                out.emplace_back(PreferencePair{row.at("prompt").get<std::string>(), row.at("chosen").get<std::string>(),
                                                row.at("rejected").get<std::string>(), {}, {}});
                break;
            case TrainingMethod::KTO:
                out.emplace_back(ListwiseRecord{row.at("prompt").get<std::string>(),
                                                row.at("completion").get<std::string>(), row.at("label").get<bool>(),
                                                {}, {}});
                break;
        }
    }
    return out;
}

json dataset_manifest(const TrainingData& data, std::string_view variant, const ShotPool& pool,
                      std::optional<int> k_prime, std::size_t posts) {
    const auto records = static_cast<std::size_t>(std::count(data.jsonl.begin(), data.jsonl.end(), '\n'));
    json doc = {{"method", to_string(data.method)},
                {"variant", variant},
                {"digest", data.digest()},
                {"records", records},
                {"posts", posts},
                {"pool", {{"k", pool.k}, {"seed", pool.seed}, {"split", to_string(pool.source_split)},
                          {"size", pool.examples.size()}}}};
    doc["k_prime"] = k_prime ? json(*k_prime) : json(nullptr);
    return doc;
}

}  // namespace modalign
