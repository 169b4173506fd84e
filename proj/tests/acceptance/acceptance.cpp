#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "modalign/hyperparams.hpp"
#include "modalign/text_classifier.hpp"

using namespace modalign;
using namespace modalign::testing;

namespace {

const std::filesystem::path kGolden = MODALIGN_GOLDEN_DIR;

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool condition, const std::string& what) {
        if (!condition) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

using Criterion = std::function<void(Outcome&)>;

std::string label_of(const std::vector<LabeledExample>& examples, const std::string& id) {
    for (const auto& ex : examples) {
        if (ex.post.id == id) return ex.gold_label;
    }
    return {};
}

std::vector<std::string> lineage_of(const CellRecord& cell) {
    return cell.final_model() ? cell.final_model()->stages() : std::vector<std::string>{};
}

json without_times(json doc) {
    if (doc.is_object()) {
        doc.erase("started_at");
        doc.erase("finished_at");
        doc.erase("created_at");
        for (auto& [_, v] : doc.items()) v = without_times(v);
    } else if (doc.is_array()) {
        for (auto& v : doc) v = without_times(v);
    }
    return doc;
}

void count_laws(Outcome& out) {
    const auto space = make_space(3);
    std::vector<LabeledExample> examples;
    for (int i = 0; i < 100; ++i) examples.push_back(make_example("c" + std::to_string(i), space.name_at(i % 3)));
    const Stopwatch clock;
    const auto cset = make_cset(space, examples);
    const auto kto = build_kto_records(cset);
    const auto dpo = build_dpo_pairs(cset);
    const auto elapsed = clock.seconds();
    std::size_t desirable = 0;
    for (const auto& r : kto) desirable += r.desirable ? 1 : 0;
    out.detail << "kto=" << kto.size() << " desirable=" << desirable << " dpo=" << dpo.size() << " t=" << elapsed << "s";
    out.require(kto.size() == 300, "300 KTO records");
    out.require(desirable == 100, "100 desirable");
    out.require(dpo.size() == 200, "200 DPO pairs");
    out.require(elapsed < 1.0, "runtime < 1 s");
}

void subsampling(Outcome& out) {
    const auto space = make_space(3);
    const auto examples = make_examples(space, 256);
    const auto cset = make_cset(space, examples);
    const auto pool = make_pool(examples, 256);
    const Stopwatch clock;
    for (int kp : {128, 192}) {
        const auto expected = static_cast<std::size_t>(kp) * 3 * 2;
        const auto by_k = subsample_dpo_k(pool, kp, 11, cset);
        const auto by_n = subsample_dpo_n(pool, kp, 11, cset);
        out.detail << "k'=" << kp << " K=" << by_k.size() << " N=" << by_n.size() << " ";

        std::map<std::string, std::size_t> pairs_per_post;
        for (const auto& p : by_k) ++pairs_per_post[p.post_id];
        std::map<std::string, std::size_t> posts_per_class;
        bool whole_posts = true;
        for (const auto& [id, n] : pairs_per_post) {
            whole_posts = whole_posts && n == 2;
            ++posts_per_class[label_of(examples, id)];
        }
        bool parity = whole_posts;
        for (const auto& name : space.names()) parity = parity && posts_per_class[name] == static_cast<std::size_t>(kp);

        std::set<std::pair<std::string, std::string>> combos;
        for (const auto& p : by_n) combos.emplace(p.post_id, p.rejected_label);

        out.require(by_k.size() == expected, "DPO-K size at k'=" + std::to_string(kp));
        out.require(by_n.size() == expected, "DPO-N size at k'=" + std::to_string(kp));
        out.require(parity, "DPO-K per-class parity at k'=" + std::to_string(kp));
        out.require(combos.size() == by_n.size(), "DPO-N distinct at k'=" + std::to_string(kp));
    }
    const auto elapsed = clock.seconds();
    out.detail << "t=" << elapsed << "s";
    out.require(elapsed < 5.0, "runtime < 5 s");
}

void scorer_oracle(Outcome& out) {
    Rng rng(20240601);
    const Stopwatch clock;
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t sizes[3] = {2, 3, 6};
        const auto m = sizes[rng.below(3)];
        const auto space = make_space(m);
        const auto n = 1 + rng.below(50);
        std::vector<std::size_t> gold;
        std::vector<std::optional<std::size_t>> pred;
        std::vector<Prediction> predictions;
        for (std::uint64_t i = 0; i < n; ++i) {
            gold.push_back(rng.below(m));
            const auto r = rng.below(m + 1);
            pred.push_back(r == m ? std::nullopt : std::optional<std::size_t>(r));
            predictions.push_back({space.name_at(gold.back()), response_for(space, pred.back())});
        }
        const auto report = score(predictions, space);
        const auto oracle = oracle_score(gold, pred, m);
        worst = std::max(worst, std::abs(report.macro_f1 - oracle.macro_f1));
        for (std::size_t c = 0; c < m; ++c) {
            worst = std::max(worst, std::abs(report.per_class[c].second.precision - oracle.per_class[c][0]));
            worst = std::max(worst, std::abs(report.per_class[c].second.recall - oracle.per_class[c][1]));
            worst = std::max(worst, std::abs(report.per_class[c].second.f1 - oracle.per_class[c][2]));
        }
    }
    const auto elapsed = clock.seconds();
    out.detail << "max_abs_diff=" << worst << " t=" << elapsed << "s";
    out.require(worst <= 1e-9, "agreement within 1e-9");
    out.require(elapsed < 10.0, "runtime < 10 s");
}

void prompt_fidelity(Outcome& out) {
    const Post post{"golden-1", "<user> you people never learn, go back where you came from", std::nullopt};
    std::size_t files = 0;
    std::size_t round_trips = 0;
    for (const auto& key : builtin_task_keys()) {
        const auto space = builtin_task(key).space;
        out.require(render_classification_prompt(post, space).text == read_file(kGolden / (key + "_classification.txt")),
                    key + " classification golden");
        auto stem = space.name_at(space.size() - 1);
        for (auto& c : stem) c = c == ' ' ? '_' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.require(render_conditional_prompt(post, space, space.name_at(space.size() - 1)).text ==
                        read_file(kGolden / (key + "_conditional_" + stem + ".txt")),
                    key + " conditional golden");
        files += 2;
        for (const auto& ex : make_examples(space, 3)) {
            const auto record = build_sft_record(ex, space);
            const auto parsed = parse_response(record.completion, space);
            out.require(parsed.label == std::optional<std::string>(ex.gold_label), "round trip of " + ex.post.id);
            out.require(parsed.explanation == ex.seed_explanation, "explanation round trip of " + ex.post.id);
            ++round_trips;
        }
    }
    out.detail << "golden_files=" << files << " round_trips=" << round_trips;
}

void stage1_mock(Outcome& out) {
    const auto inputs = mock_inputs();
    const auto config = mock_config({16});
    const Stopwatch clock;
    MockBackend first_backend;
    const auto first = run_stage1(config, inputs, first_backend);
    const auto elapsed = clock.seconds();
    MockBackend second_backend;
    const auto second = run_stage1(config, inputs, second_backend);
    const auto cells = first.cells();
    out.detail << "cells=" << cells.size() << " failed=" << first.failed_count();
    out.require(cells.size() == 2, "one cell per model");
    out.require(first.failed_count() == 0, "zero FAILED cells");
    for (const auto& cell : cells) {
        out.require(lineage_of(cell) == std::vector<std::string>{"SFT", "DPO"}, cell.model + " lineage [SFT, DPO]");
        const bool has_scores = cell.val && !cell.steps.empty() && cell.steps.front().val;
        out.require(has_scores, cell.model + " validation scores present");
        if (has_scores) {
            out.detail << " " << cell.model << " sft_acc=" << cell.steps.front().val->accuracy
                       << " dpo_acc=" << cell.val->accuracy;
            out.require(cell.val->accuracy >= cell.steps.front().val->accuracy, cell.model + " accuracy non-regression");
        }
    }
    const bool deterministic = without_times(first.to_json()) == without_times(second.to_json());
    out.detail << " deterministic=" << (deterministic ? "yes" : "no") << " t=" << elapsed << "s";
    out.require(deterministic, "identical runs under fixed seeds");
    out.require(elapsed < 30.0, "runtime < 30 s");
}

void stage2_mock(Outcome& out) {
    const auto inputs = mock_inputs();
    auto config = mock_config({16});
    config.k_check = 16;
    MockBackend backend;
    const Stopwatch clock;
    const auto stage1 = run_stage1(config, inputs, backend);
    const auto stage2 = run_stage2(config, inputs, backend, stage1);
    const auto elapsed = clock.seconds();
    const auto check = stage1.find("stage1", "flan-t5-large", 16, "DPO");
    out.require(check.has_value(), "K_check pool recorded");
    const std::set<std::string> check_ids = check ? std::set<std::string>(check->pool_ids.begin(), check->pool_ids.end())
                                                  : std::set<std::string>{};
    std::set<std::pair<std::string, std::string>> ordered;
    std::size_t overlap = 0;
    for (const auto& cell : stage2.cells()) {
        ordered.emplace(cell.model, cell.partner.value_or(""));
        out.require(cell.succeeded(), cell.model + " cell succeeded");
        out.require(lineage_of(cell) == std::vector<std::string>{"SFT", "DPO", "XSFT", "XDPO"},
                    cell.model + " lineage [SFT, DPO, XSFT, XDPO]");
        out.require(!cell.pool_ids.empty(), cell.model + " complementary pool recorded");
        for (const auto& id : cell.pool_ids) overlap += check_ids.count(id);
    }
    out.detail << "cross_cells=" << ordered.size() << " overlap=" << overlap << " t=" << elapsed << "s";
    out.require(ordered == std::set<std::pair<std::string, std::string>>{{"flan-t5-large", "llama-3-8b"},
                                                                         {"llama-3-8b", "flan-t5-large"}},
                "both ordered pairs");
    out.require(overlap == 0, "complementary pools disjoint from K_check");
    out.require(elapsed < 30.0, "runtime < 30 s");
}

ModelRef disagreeing_model(MockBackend& backend, const std::string& name, const std::vector<LabeledExample>& wrong,
                           const LabelSpace& space) {
    std::vector<SftRecord> records;
    for (const auto& ex : wrong) {
        const auto other = space.name_at((*space.index_of(ex.gold_label) + 1) % space.size());
        records.push_back({render_conditional_prompt(ex.post, space, ex.gold_label).text,
                           format_completion("It does not fit.", other)});
    }
    return backend.train(backend.base_model(name), serialize(std::span<const SftRecord>(records)),
                         TrainingSpec::defaults(TrainingMethod::SFT), "SFT");
}

void label_consistency(Outcome& out) {
    const auto space = builtin_task("hatexplain").space;
    const auto pool = make_examples(space, 128);
    MockBackend backend;
    const std::vector<LabeledExample> wrong_a(pool.begin(), pool.begin() + 30);
    const std::vector<LabeledExample> wrong_b(pool.begin() + 20, pool.begin() + 42);
    const auto a = disagreeing_model(backend, "flan-t5-large", wrong_a, space);
    const auto b = disagreeing_model(backend, "llama-3-8b", wrong_b, space);
    const auto kept = collect_label_consistent(backend, a, b, pool, space);
    const double pct = std::round(kept.rate() * 1000.0) / 10.0;
    out.detail << "candidates=" << kept.total << " retained=" << kept.retained() << " rate=" << pct << "%";
    out.require(kept.total == 384, "384 candidates");
    out.require(kept.retained() == 342, "342 retained");
    out.require(pct == 89.1, "89.1% retained");
}

void vote_aggregation(Outcome& out) {
    const auto space = builtin_task("hatexplain").space;
    const std::size_t ties = 5;
    const auto data = synthetic_votes(space, {{25, 73}, {63, 64}, {54, 63}}, ties, "T5", "Llama");
    const auto tally = aggregate_votes(data.votes, data.gold, space);
    out.detail << "rows=";
    const std::vector<std::size_t> expected{98, 127, 117};
    for (std::size_t l = 0; l < space.size(); ++l) {
        const auto& name = space.name_at(l);
        out.detail << name << ":" << tally.count(name, "T5") << "/" << tally.count(name, "Llama") << "="
                   << tally.row_total(name) << " ";
        out.require(tally.row_total(name) == expected[l], name + " row total");
    }
    out.require(tally.count("Normal", "T5") == 25 && tally.count("Normal", "Llama") == 73, "Normal winners");
    out.require(tally.count("Offensive", "T5") == 63 && tally.count("Offensive", "Llama") == 64, "Offensive winners");
    out.require(tally.count("Hate", "T5") == 54 && tally.count("Hate", "Llama") == 63, "Hate winners");
    out.detail << "ties=" << tally.tie_count << " samples=" << data.gold.size();
    out.require(tally.tie_count == ties, "tie count");
    out.require(tally.winners.size() + tally.tie_count == data.gold.size(), "winners + ties = samples");
}

void data_percent(Outcome& out) {
    const auto hx = compare_to_full("HateXplain", "Llama", 0.6, 0.7, 256, builtin_task("hatexplain").space, 12089);
    const auto lh = compare_to_full("Latent Hate", "Llama", 0.6, 0.7, 256, builtin_task("latent_hate").space, 11467);
    const auto implicit = builtin_task("implicit_hate");
    const auto implicit_train = split_sizes(4153, implicit.ratios)[0];
    const auto ih = compare_to_full("Implicit Hate", "Llama", 0.6, 0.67, 256, implicit.space, implicit_train);
    out.detail << "HateXplain=" << hx.data_pct() << "% LatentHate=" << lh.data_pct() << "% ImplicitHate="
               << ih.data_pct() << "% (train=" << implicit_train << ", published 57%, reported only)";
    out.require(hx.data_pct() == 6, "HateXplain 6%");
    out.require(lh.data_pct() == 7, "Latent Hate 7%");
}

void registry(Outcome& out) {
    const auto reg = HyperparameterRegistry::published();
    std::size_t matched = 0;
    for (const auto& row : kRegistrySpotChecks) {
        const auto hit = reg.find(row.task, row.model, row.k, row.technique);
        const bool ok = hit && hit->epochs == row.epochs &&
                        std::abs(hit->learning_rate - row.learning_rate) <= 1e-12 * row.learning_rate;
        out.require(ok, std::string(row.task) + "/" + row.model + "/" + std::to_string(row.k) + "/" + row.technique);
        matched += ok ? 1 : 0;
    }
    const auto kto = reg.find("HateXplain", "Llama", 256, "KTO");
    const auto dpo = reg.find("Implicit Hate", "T5", 128, "DPO");
    out.require(kto && *kto == Hyperparameters{3, 5e-07}, "(HateXplain, Llama, 256, KTO) -> (3, 5e-07)");
    out.require(dpo && *dpo == Hyperparameters{1, 7e-05}, "(Implicit Hate, T5, 128, DPO) -> (1, 7e-05)");
    out.detail << "matched=" << matched << "/" << std::size(kRegistrySpotChecks);
    out.require(matched >= 10, "at least 10 entries");
}

void style_attribution(Outcome& out) {
    const Stopwatch clock;
    const auto clf = train_text_classifier(style_texts(0, 300, 1), style_texts(1, 300, 1), {}, "ours", "partner");
    std::size_t correct = 0;
    const auto held_a = style_texts(0, 200, 77);
    const auto held_b = style_texts(1, 200, 77);
    for (const auto& t : held_a) correct += clf.predict(t) == "ours" ? 1 : 0;
    for (const auto& t : held_b) correct += clf.predict(t) == "partner" ? 1 : 0;
    const double accuracy = static_cast<double>(correct) / 400.0;
    auto mixed = style_texts(0, 100, 123);
    const auto other = style_texts(1, 100, 123);
    mixed.insert(mixed.end(), other.begin(), other.end());
    const auto attribution = attribute_style(clf, mixed);
    const auto elapsed = clock.seconds();
    out.detail << "held_out_acc=" << accuracy << " mix_ours=" << attribution.percent("ours") << "% t=" << elapsed << "s";
    out.require(accuracy >= 0.95, "held-out accuracy >= 0.95");
    out.require(std::abs(attribution.percent("ours") - 50.0) <= 5.0, "50/50 mix within 50 +/- 5");
    out.require(elapsed < 120.0, "runtime < 2 min");
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, Criterion>> criteria{
        {"count laws", count_laws},
        {"sub-sampling equality", subsampling},
        {"scorer oracle", scorer_oracle},
        {"prompt fidelity", prompt_fidelity},
        {"mock stage 1", stage1_mock},
        {"mock stage 2", stage2_mock},
        {"label-consistency filter", label_consistency},
        {"vote aggregation", vote_aggregation},
        {"data percentage", data_percent},
        {"hyperparameter registry", registry},
        {"style attribution", style_attribution},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome out;
        try {
            criteria[i].second(out);
        } catch (const std::exception& e) {
            out.pass = false;
            out.detail << " [exception: " << e.what() << "]";
        }
        failures += out.pass ? 0 : 1;
        std::cout << (out.pass ? "PASS" : "FAIL") << " criterion " << (i + 1) << " (" << criteria[i].first
                  << "): " << out.detail.str() << '\n';
    }
    return failures == 0 ? 0 : 1;
}
