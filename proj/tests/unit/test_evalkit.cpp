#include <doctest.h>

#include <fstream>

#include "fixtures.hpp"
#include "modalign/error.hpp"
#include "modalign/evalkit.hpp"
#include "modalign/rng.hpp"

using namespace modalign;
using namespace modalign::testing;

namespace {

const std::filesystem::path kGolden = MODALIGN_GOLDEN_DIR;

std::vector<Prediction> predictions(const LabelSpace& space, const std::vector<std::size_t>& gold,
                                    const std::vector<std::optional<std::size_t>>& pred) {
    std::vector<Prediction> out;
    for (std::size_t i = 0; i < gold.size(); ++i) out.push_back({space.name_at(gold[i]), response_for(space, pred[i])});
    return out;
}

const ClassScores& scores_of(const EvalReport& report, std::string_view label) {
    for (const auto& [name, s] : report.per_class) {
        if (name == label) return s;
    }
    throw std::out_of_range("no class");
}

EvalReport sample_report() {
    const LabelSpace space("HateXplain", {{"Normal", "n"}, {"Offensive", "o"}, {"Hate", "h"}});
    auto report = score(predictions(space, {0, 0, 1, 1, 2, 2}, {0, 0, 1, 2, 2, 2}), space);
    report.model_digest = "0123456789abcdef";
    report.group = "K=16";
    report.series = "SFT+DPO";
    return report;
}

}  // namespace

TEST_SUITE("evalkit") {

TEST_CASE("hand-computed macro-F1") {
    const LabelSpace space("t", {{"A", "a"}, {"B", "b"}, {"C", "c"}});
    const auto report = score(predictions(space, {0, 0, 1, 1, 2, 2}, {0, 0, 1, 2, 2, 2}), space);
    CHECK(scores_of(report, "A").f1 == doctest::Approx(1.0));
    CHECK(scores_of(report, "B").precision == doctest::Approx(1.0));
    CHECK(scores_of(report, "B").recall == doctest::Approx(0.5));
    CHECK(scores_of(report, "B").f1 == doctest::Approx(2.0 / 3.0));
    CHECK(scores_of(report, "C").precision == doctest::Approx(2.0 / 3.0));
    CHECK(scores_of(report, "C").f1 == doctest::Approx(0.8));
    CHECK(report.macro_f1 == doctest::Approx((1.0 + 2.0 / 3.0 + 0.8) / 3.0));
    CHECK(report.macro_f1 == doctest::Approx(0.8222).epsilon(1e-4));
    CHECK(report.accuracy == doctest::Approx(5.0 / 6.0));
    CHECK(scores_of(report, "C").support == 2);
}

TEST_CASE("perfect predictions score one") {
    const auto space = make_space(4);
    const auto report = score(predictions(space, {0, 1, 2, 3, 3}, {0, 1, 2, 3, 3}), space);
    CHECK(report.macro_f1 == doctest::Approx(1.0));
    CHECK(report.invalid_count == 0);
}

TEST_CASE("invalid predictions count against recall only") {
    const auto space = make_space(2);
    const auto report = score(predictions(space, {0, 0, 1}, {0, std::nullopt, 1}), space);
    CHECK(report.invalid_count == 1);
    CHECK(scores_of(report, "L0").precision == doctest::Approx(1.0));
    CHECK(scores_of(report, "L0").recall == doctest::Approx(0.5));
    CHECK(scores_of(report, "L1").precision == doctest::Approx(1.0));
}

TEST_CASE("zero-support classes contribute zero") {
    const auto space = make_space(3);
    const auto report = score(predictions(space, {0, 1}, {0, 1}), space);
    CHECK(scores_of(report, "L2").f1 == 0.0);
    CHECK(scores_of(report, "L2").support == 0);
    CHECK(report.macro_f1 == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("score rejects empty input and unknown gold labels") {
    const auto space = make_space(2);
    CHECK_THROWS_AS(score(std::vector<Prediction>{}, space), EmptyInput);
    std::vector<Prediction> bad{{"nope", response_for(space, 0)}};
    CHECK_THROWS_AS(score(bad, space), UnknownLabel);
}

TEST_CASE("score agrees with a brute-force confusion matrix") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t sizes[3] = {2, 3, 6};
        const auto m = sizes[rng.below(3)];
        const auto space = make_space(m);
        const auto n = 1 + rng.below(50);
        std::vector<std::size_t> gold;
        std::vector<std::optional<std::size_t>> pred;
        for (std::uint64_t i = 0; i < n; ++i) {
            gold.push_back(rng.below(m));
            const auto r = rng.below(m + 1);
            pred.push_back(r == m ? std::nullopt : std::optional<std::size_t>(r));
        }
        const auto report = score(predictions(space, gold, pred), space);
        const auto oracle = oracle_score(gold, pred, m);
        CHECK(std::abs(report.macro_f1 - oracle.macro_f1) <= 1e-9);
        CHECK(std::abs(report.accuracy - oracle.accuracy) <= 1e-9);
        for (std::size_t c = 0; c < m; ++c) {
            CHECK(std::abs(report.per_class[c].second.precision - oracle.per_class[c][0]) <= 1e-9);
            CHECK(std::abs(report.per_class[c].second.recall - oracle.per_class[c][1]) <= 1e-9);
            CHECK(std::abs(report.per_class[c].second.f1 - oracle.per_class[c][2]) <= 1e-9);
        }
    }
}

TEST_CASE("breaking a correct prediction never raises macro-F1") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto space = make_space(3);
        std::vector<std::size_t> gold;
        std::vector<std::optional<std::size_t>> pred;
        for (int i = 0; i < 30; ++i) {
            gold.push_back(rng.below(3));
            pred.push_back(rng.below(2) ? std::optional<std::size_t>(gold.back()) : std::optional<std::size_t>(rng.below(3)));
        }
        const auto before = score(predictions(space, gold, pred), space).macro_f1;
        for (std::size_t i = 0; i < gold.size(); ++i) {
            if (pred[i] != gold[i]) continue;
            auto worse = pred;
            worse[i] = std::nullopt;
            CHECK(score(predictions(space, gold, worse), space).macro_f1 <= before + 1e-12);
            break;
        }
    }
}

TEST_CASE("reports round-trip through json") {
    const auto report = sample_report();
    const auto back = EvalReport::from_json(report.to_json());
    CHECK(back.to_json() == report.to_json());
    CHECK(back.per_class.front().first == "Normal");
}

TEST_CASE("data-efficiency comparison rounds to whole percent") {
    const auto three = make_space(3);
    const auto hx = compare_to_full("HateXplain", "Llama", 0.60, 0.70, 256, three, 12089);
    CHECK(hx.data_pct() == 6);
    CHECK(hx.data_ratio == doctest::Approx(768.0 / 12089.0));
    CHECK(hx.f1_pct() == 86);
    CHECK(compare_to_full("Latent Hate", "Llama", 0.5, 0.5, 256, three, 11467).data_pct() == 7);
    CHECK(compare_to_full("x", "m", 0.5, 0.5, 0, three, 10).f1_pct() == 100);
    CHECK(round_percent(0.125) == 13);
    CHECK(round_percent(0.1249) == 12);
    CHECK_THROWS_AS(compare_to_full("x", "m", 0.5, 0.0, 16, three, 10), InvalidBaseline);
    CHECK_THROWS_AS(compare_to_full("x", "m", 0.5, 0.5, 16, three, 0), InvalidBaseline);
    const auto doc = hx.to_json();
    CHECK(doc.at("data_pct") == 6);
    CHECK(doc.at("dataset") == "HateXplain");
}

TEST_CASE("style attribution percentages sum to one hundred") {
    const auto clf = train_text_classifier(style_texts(0, 100, 3), style_texts(1, 100, 3), {}, "ours", "partner");
    auto mixed = style_texts(0, 40, 5);
    const auto other = style_texts(1, 60, 5);
    mixed.insert(mixed.end(), other.begin(), other.end());
    const auto attribution = attribute_style(clf, mixed);
    CHECK(attribution.labels.size() == 100);
    CHECK(attribution.percent("ours") + attribution.percent("partner") == doctest::Approx(100.0));
    CHECK(attribution.percent("ours") == doctest::Approx(40.0).epsilon(0.15));
    CHECK_THROWS_AS(attribute_style(clf, std::vector<std::string>{}), EmptyInput);
}

TEST_CASE("votes aggregate by strict majority") {
    const auto space = make_space(2);
    const std::map<std::string, std::string> gold{{"a", "L0"}, {"b", "L1"}, {"c", "L0"}};
    const std::vector<Vote> votes{{"a", "1", "X"}, {"a", "2", "X"}, {"a", "3", "Y"},
                                  {"b", "1", "Y"}, {"b", "2", "X"}, {"c", "1", "Y"}};
    const auto tally = aggregate_votes(votes, gold, space);
    CHECK(tally.models == std::vector<std::string>{"X", "Y"});
    CHECK(tally.count("L0", "X") == 1);
    CHECK(tally.count("L0", "Y") == 1);
    CHECK(tally.tie_count == 1);
    CHECK(tally.voted_samples == 3);
    CHECK(tally.winners.count("b") == 0);
    CHECK(tally.row_total("L0") == 2);
    CHECK(tally.row_total("L1") == 0);
    CHECK(tally.to_csv() == "label,X,Y,row_total\nL0,1,1,2\nL1,0,0,0\nties,,,1\n");

    const std::vector<Vote> stray{{"zzz", "1", "X"}};
    CHECK_THROWS_AS(aggregate_votes(stray, gold, space), UnknownSample);
}

TEST_CASE("vote totals are conserved") {
    const auto space = make_space(3);
    const auto data = synthetic_votes(space, {{4, 5}, {0, 2}, {3, 0}}, 5, "A", "B");
    const auto tally = aggregate_votes(data.votes, data.gold, space);
    CHECK(tally.row_total("L0") == 9);
    CHECK(tally.count("L1", "B") == 2);
    CHECK(tally.winners.size() + tally.tie_count == data.gold.size());
    CHECK(tally.to_json().at("tie_count") == 5);
}

TEST_CASE("bar charts label every bar") {
    const std::vector<ChartBar> bars{{"K=16", "SFT", 0.41}, {"K=16", "SFT+DPO", 0.52}, {"K=32", "SFT", 0.47}};
    const auto svg = render_bar_chart("demo", bars);
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("0.41") != std::string::npos);
    CHECK(svg.find("0.52") != std::string::npos);
    CHECK(svg.find("K=32") != std::string::npos);
    CHECK(svg.find("SFT+DPO") != std::string::npos);
}

TEST_CASE("emit_report writes the report and one chart per task") {
    const auto dir = scratch_dir("evalkit-report");
    const std::vector<EvalReport> reports{sample_report()};
    const std::vector<ComparisonRow> rows{compare_to_full("HateXplain", "Llama", 0.6, 0.7, 256, make_space(3), 12089)};
    const auto space = make_space(3);
    const auto votes = synthetic_votes(space, {{1, 2}, {0, 1}, {1, 0}}, 1, "A", "B");
    const std::vector<VoteTally> tallies{aggregate_votes(votes.votes, votes.gold, space)};
    const auto written = emit_report(reports, rows, tallies, dir);
    REQUIRE(written.size() == 2);
    CHECK(written[0].filename() == "report.json");
    CHECK(written[1].filename() == "chart_hatexplain.svg");
    CHECK(read_file(written[0]) == read_file(kGolden / "report.json"));

    std::ofstream(dir / "blocker") << "x";
    CHECK_THROWS_AS(emit_report(reports, rows, tallies, dir / "blocker" / "out"), IoFailure);
}

}
