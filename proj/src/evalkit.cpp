#include "modalign/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "modalign/error.hpp"

namespace modalign {

namespace {

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

std::string fixed(double value, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, value);
    return buf;
}

std::string xml_escape(std::string_view text) {
    std::string out;
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string file_stem(std::string_view task) {
    std::string out;
    for (char c : task) {
        const auto u = static_cast<unsigned char>(c);
        if (std::isalnum(u)) out += static_cast<char>(std::tolower(u));
        else if (!out.empty() && out.back() != '_') out += '_';
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out.empty() ? "report" : out;
}

}  // namespace

json EvalReport::to_json() const {
    json per = json::object();
    for (const auto& [label, s] : per_class) {
        per[label] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
    }
    json labels = json::array();
    for (const auto& entry : per_class) labels.push_back(entry.first);
    return {{"task", task},
            {"model_digest", model_digest},
            {"macro_f1", macro_f1},
            {"accuracy", accuracy},
            {"labels", labels},
            {"per_class", per},
            {"invalid_count", invalid_count},
            {"n", n},
            {"group", group},
            {"series", series}};
}

EvalReport EvalReport::from_json(const json& doc) {
    EvalReport r;
    r.task = doc.at("task").get<std::string>();
    r.model_digest = doc.value("model_digest", "");
    r.macro_f1 = doc.at("macro_f1").get<double>();
    r.accuracy = doc.value("accuracy", 0.0);
    r.invalid_count = doc.at("invalid_count").get<std::size_t>();
    r.n = doc.value("n", std::size_t{0});
    r.group = doc.value("group", "");
    r.series = doc.value("series", "");
    const auto& per = doc.at("per_class");
    std::vector<std::string> order;
    if (doc.contains("labels")) order = doc.at("labels").get<std::vector<std::string>>();
    else
        for (const auto& [key, _] : per.items()) order.push_back(key);
    for (const auto& label : order) {
        const auto& s = per.at(label);
        r.per_class.emplace_back(label, ClassScores{s.at("precision").get<double>(), s.at("recall").get<double>(),
                                                    s.at("f1").get<double>(), s.at("support").get<std::size_t>()});
    }
    return r;
}

EvalReport score(std::span<const Prediction> predictions, const LabelSpace& space) {
    if (predictions.empty()) throw EmptyInput("score: no predictions");
    const std::size_t m = space.size();
    std::vector<std::size_t> tp(m), fp(m), fn(m), support(m);
    EvalReport report;
    report.task = space.task_name();
    report.n = predictions.size();
    std::size_t correct = 0;
    for (const auto& p : predictions) {
        const auto gold = space.index_of(p.gold);
        if (!gold) throw UnknownLabel("score: unknown gold label '" + p.gold + "'");
        ++support[*gold];
        const auto pred = p.response.label ? space.index_of(*p.response.label) : std::nullopt;
        if (!pred) {
            ++report.invalid_count;
            ++fn[*gold];
        } else if (*pred == *gold) {
            ++tp[*gold];
            ++correct;
        } else {
            ++fp[*pred];
            ++fn[*gold];
        }
    }
    double sum_f1 = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        ClassScores s;
        s.support = support[i];
        s.precision = safe_div(static_cast<double>(tp[i]), static_cast<double>(tp[i] + fp[i]));
        s.recall = safe_div(static_cast<double>(tp[i]), static_cast<double>(tp[i] + fn[i]));
        s.f1 = safe_div(2.0 * s.precision * s.recall, s.precision + s.recall);
        sum_f1 += s.f1;
        report.per_class.emplace_back(space.name_at(i), s);
    }
    report.macro_f1 = sum_f1 / static_cast<double>(m);
    report.accuracy = static_cast<double>(correct) / static_cast<double>(report.n);
    return report;
}

int round_percent(double ratio) { return static_cast<int>(std::floor(ratio * 100.0 + 0.5 + 1e-9)); }

int ComparisonRow::f1_pct() const { return round_percent(f1_ratio); }
int ComparisonRow::data_pct() const { return round_percent(data_ratio); }

json ComparisonRow::to_json() const {
    return {{"dataset", dataset}, {"model", model},       {"f1_full", f1_full},   {"f1_aug", f1_aug},
            {"f1_ratio", f1_ratio}, {"data_ratio", data_ratio}, {"f1_pct", f1_pct()}, {"data_pct", data_pct()}};
}

ComparisonRow compare_to_full(std::string dataset, std::string model, double f1_aug, double f1_full, int k,
                              const LabelSpace& space, std::size_t train_size) {
    if (!(f1_full > 0.0)) throw InvalidBaseline("compare_to_full: full-model F1 must be positive");
    if (train_size == 0) throw InvalidBaseline("compare_to_full: training split is empty");
    if (k < 0) throw InvalidBaseline("compare_to_full: negative k");
    ComparisonRow row;
    row.dataset = std::move(dataset);
    row.model = std::move(model);
    row.f1_full = f1_full;
    row.f1_aug = f1_aug;
    row.f1_ratio = f1_aug / f1_full;
    row.data_ratio = static_cast<double>(k) * static_cast<double>(space.size()) / static_cast<double>(train_size);
    return row;
}

double StyleAttribution::percent(std::string_view cls) const {
    for (const auto& [name, pct] : percentages)
        if (name == cls) return pct;
    return 0.0;
}

StyleAttribution attribute_style(const TextClassifier& classifier, std::span<const std::string> explanations) {
    if (explanations.empty()) throw EmptyInput("attribute_style: no explanations");
    StyleAttribution out;
    std::vector<std::size_t> counts(classifier.classes().size());
    for (const auto& text : explanations) {
        const auto& label = classifier.predict(text);
        out.labels.push_back(label);
        const auto it = std::find(classifier.classes().begin(), classifier.classes().end(), label);
        ++counts[static_cast<std::size_t>(it - classifier.classes().begin())];
    }
    for (std::size_t i = 0; i < counts.size(); ++i) {
        out.percentages.emplace_back(classifier.classes()[i], 100.0 * static_cast<double>(counts[i]) /
                                                                  static_cast<double>(explanations.size()));
    }
    return out;
}

std::size_t VoteTally::row_total(std::string_view label) const {
    for (const auto& [name, counts] : rows) {
        if (name != label) continue;
        std::size_t total = 0;
        for (const auto& [_, c] : counts) total += c;
        return total;
    }
    return 0;
}

std::size_t VoteTally::count(std::string_view label, std::string_view model) const {
    for (const auto& [name, counts] : rows) {
        if (name != label) continue;
        const auto it = counts.find(std::string(model));
        return it == counts.end() ? 0 : it->second;
    }
    return 0;
}

json VoteTally::to_json() const {
    json out_rows = json::array();
    for (const auto& [label, counts] : rows) {
        json c = json::object();
        for (const auto& model : models) c[model] = count(label, model);
        out_rows.push_back({{"label", label}, {"counts", c}, {"total", row_total(label)}});
    }
    return {{"models", models},
            {"rows", out_rows},
            {"winners", winners},
            {"tie_count", tie_count},
            {"voted_samples", voted_samples}};
}

std::string VoteTally::to_csv() const {
    std::ostringstream out;
    out << "label";
    for (const auto& model : models) out << ',' << model;
    out << ",row_total\n";
    for (const auto& [label, _] : rows) {
        out << label;
        for (const auto& model : models) out << ',' << count(label, model);
        out << ',' << row_total(label) << '\n';
    }
    out << "ties";
    for (std::size_t i = 0; i < models.size(); ++i) out << ',';
    out << ',' << tie_count << '\n';
    return out.str();
}

VoteTally aggregate_votes(std::span<const Vote> votes, const std::map<std::string, std::string>& gold_by_sample,
                          const LabelSpace& space) {
    VoteTally tally;
    for (const auto& entry : space.entries()) tally.rows.emplace_back(entry.name, std::map<std::string, std::size_t>{});

    std::map<std::string, std::map<std::string, std::size_t>> per_sample;
    for (const auto& vote : votes) {
        if (!gold_by_sample.contains(vote.sample_id))
            throw UnknownSample("aggregate_votes: unregistered sample '" + vote.sample_id + "'");
        if (std::find(tally.models.begin(), tally.models.end(), vote.choice) == tally.models.end())
            tally.models.push_back(vote.choice);
        ++per_sample[vote.sample_id][vote.choice];
    }

    for (const auto& [sample, counts] : per_sample) {
        ++tally.voted_samples;
        std::size_t total = 0;
        for (const auto& [_, c] : counts) total += c;
        const std::string* winner = nullptr;
        for (const auto& [model, c] : counts)
            if (2 * c > total) winner = &model;
        if (!winner) {
            ++tally.tie_count;
            continue;
        }
        const auto& gold = gold_by_sample.at(sample);
        const auto idx = space.index_of(gold);
        if (!idx) throw UnknownLabel("aggregate_votes: sample '" + sample + "' has unknown gold '" + gold + "'");
        ++tally.rows[*idx].second[*winner];
        tally.winners[sample] = *winner;
    }
    return tally;
}

std::string render_bar_chart(std::string_view title, std::span<const ChartBar> bars) {
    std::vector<std::string> groups, series;
    for (const auto& bar : bars) {
        if (std::find(groups.begin(), groups.end(), bar.group) == groups.end()) groups.push_back(bar.group);
        if (std::find(series.begin(), series.end(), bar.series) == series.end()) series.push_back(bar.series);
    }
    static constexpr const char* palette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759",
                                              "#76b7b2", "#edc948", "#b07aa1", "#9c755f"};
    const double bar_w = 28, gap = 24, left = 60, top = 50, plot_h = 240;
    const double group_w = bar_w * static_cast<double>(std::max<std::size_t>(series.size(), 1)) + gap;
    const double width = left + group_w * static_cast<double>(std::max<std::size_t>(groups.size(), 1)) + 20;
    const double height = top + plot_h + 60 + 18.0 * static_cast<double>(series.size());
    double max_v = 0.0;
    for (const auto& bar : bars) max_v = std::max(max_v, bar.value);
    const double scale_max = max_v > 1.0 ? max_v : 1.0;

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\""
        << fixed(height, 0) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    svg << "<text x=\"" << fixed(width / 2, 1) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
        << xml_escape(title) << "</text>\n";
    const double base = top + plot_h;
    svg << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(base, 1) << "\" x2=\"" << fixed(width - 10, 1)
        << "\" y2=\"" << fixed(base, 1) << "\" stroke=\"#333\"/>\n";
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const double gx = left + group_w * static_cast<double>(g) + gap / 2;
        for (std::size_t s = 0; s < series.size(); ++s) {
            const auto it = std::find_if(bars.begin(), bars.end(), [&](const ChartBar& b) {
                return b.group == groups[g] && b.series == series[s];
            });
            if (it == bars.end()) continue;
            const double h = plot_h * it->value / scale_max;
            const double x = gx + bar_w * static_cast<double>(s);
            svg << "<rect x=\"" << fixed(x, 1) << "\" y=\"" << fixed(base - h, 1) << "\" width=\""
                << fixed(bar_w - 2, 1) << "\" height=\"" << fixed(h, 1) << "\" fill=\"" << palette[s % 8]
                << "\"/>\n";
            svg << "<text x=\"" << fixed(x + (bar_w - 2) / 2, 1) << "\" y=\"" << fixed(base - h - 4, 1)
                << "\" text-anchor=\"middle\">" << fixed(it->value, 2) << "</text>\n";
        }
        svg << "<text x=\"" << fixed(gx + bar_w * static_cast<double>(series.size()) / 2, 1) << "\" y=\""
            << fixed(base + 16, 1) << "\" text-anchor=\"middle\">" << xml_escape(groups[g]) << "</text>\n";
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const double y = base + 36 + 18.0 * static_cast<double>(s);
        svg << "<rect x=\"" << fixed(left, 1) << "\" y=\"" << fixed(y - 10, 1) << "\" width=\"12\" height=\"12\" fill=\""
            << palette[s % 8] << "\"/>\n";
        svg << "<text x=\"" << fixed(left + 18, 1) << "\" y=\"" << fixed(y, 1) << "\">" << xml_escape(series[s])
            << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

json report_document(std::span<const EvalReport> reports, std::span<const ComparisonRow> rows,
                     std::span<const VoteTally> tallies) {
    json doc = {{"reports", json::array()}, {"comparisons", json::array()}, {"vote_tallies", json::array()}};
    for (const auto& r : reports) doc["reports"].push_back(r.to_json());
    for (const auto& r : rows) doc["comparisons"].push_back(r.to_json());
    for (const auto& t : tallies) doc["vote_tallies"].push_back(t.to_json());
    return doc;
}

std::vector<std::filesystem::path> emit_report(std::span<const EvalReport> reports, std::span<const ComparisonRow> rows,
                                               std::span<const VoteTally> tallies, const std::filesystem::path& out_dir) {
    std::vector<std::filesystem::path> written;
    try {
        std::filesystem::create_directories(out_dir);
        const auto json_path = out_dir / "report.json";
        write_file_atomic(json_path, report_document(reports, rows, tallies).dump(2) + "\n");
        written.push_back(json_path);

        std::vector<std::string> tasks;
        for (const auto& r : reports)
            if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
        for (const auto& task : tasks) {
            std::vector<ChartBar> bars;
            for (const auto& r : reports) {
                if (r.task != task) continue;
                bars.push_back({r.group.empty() ? r.model_digest.substr(0, 8) : r.group,
                                r.series.empty() ? "macro-F1" : r.series, r.macro_f1});
            }
            const auto path = out_dir / ("chart_" + file_stem(task) + ".svg");
            write_file_atomic(path, render_bar_chart(task + " macro-F1", bars));
            written.push_back(path);
        }
    } catch (const std::filesystem::filesystem_error& e) {
        throw IoFailure(std::string("emit_report: ") + e.what());
    }
    return written;
}

}  // namespace modalign
