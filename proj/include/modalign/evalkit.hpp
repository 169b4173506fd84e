#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "modalign/corpus.hpp"
#include "modalign/jsonl.hpp"
#include "modalign/prompting.hpp"
#include "modalign/text_classifier.hpp"

namespace modalign {

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

struct EvalReport {
    std::string task;
    std::string model_digest;
    double macro_f1 = 0.0;
    double accuracy = 0.0;
    /// Label-space order.
    std::vector<std::pair<std::string, ClassScores>> per_class;
    std::size_t invalid_count = 0;
    std::size_t n = 0;
    /// Chart placement: bar group (e.g. "K=16") and series (e.g. "SFT+DPO").
    std::string group;
    std::string series;

    json to_json() const;
    static EvalReport from_json(const json& doc);
};

struct Prediction {
    std::string gold;
    ParsedResponse response;
};

/// Macro-F1 over every label of the space. Unparseable predictions count as
/// a false negative for the gold class and a false positive for no class;
/// 0/0 precision, recall or F1 is 0, so zero-support classes pull the
/// average down. Throws EmptyInput for no predictions.
EvalReport score(std::span<const Prediction> predictions, const LabelSpace& space);

/// One row of a data-efficiency table.
struct ComparisonRow {
    std::string dataset;
    std::string model;
    double f1_full = 0.0;
    double f1_aug = 0.0;
    /// f1_aug / f1_full
    double f1_ratio = 0.0;
    /// (k * |S|) / train_size
    double data_ratio = 0.0;

    int f1_pct() const;
    int data_pct() const;
    json to_json() const;
};

/// Integer percent of a ratio, rounding half up.
int round_percent(double ratio);

/// Throws InvalidBaseline when f1_full or train_size is not positive.
ComparisonRow compare_to_full(std::string dataset, std::string model, double f1_aug, double f1_full, int k,
                              const LabelSpace& space, std::size_t train_size);

struct StyleAttribution {
    /// Predicted class per input text.
    std::vector<std::string> labels;
    /// Percentage per classifier class, summing to 100.
    std::vector<std::pair<std::string, double>> percentages;

    double percent(std::string_view cls) const;
};

/// Throws EmptyInput for no explanations.
StyleAttribution attribute_style(const TextClassifier& classifier, std::span<const std::string> explanations);

struct Vote {
    std::string sample_id;
    std::string annotator_id;
    /// Model the annotator preferred.
    std::string choice;
};

struct VoteTally {
    /// Source models in first-seen order.
    std::vector<std::string> models;
    /// gold label -> model -> winning samples (label-space order).
    std::vector<std::pair<std::string, std::map<std::string, std::size_t>>> rows;
    /// sample id -> winning model (tied samples absent)
    std::map<std::string, std::string> winners;
    std::size_t tie_count = 0;
    std::size_t voted_samples = 0;

    std::size_t row_total(std::string_view label) const;
    std::size_t count(std::string_view label, std::string_view model) const;
    json to_json() const;
    /// label,<model...>,row_total
    std::string to_csv() const;
};

/// Per sample, the model with a strict majority of its votes wins and is
/// counted under the sample's gold label; ties are excluded from the rows
/// and counted in tie_count. `gold_by_sample` registers the samples; a vote
/// for an unregistered sample throws UnknownSample.
VoteTally aggregate_votes(std::span<const Vote> votes, const std::map<std::string, std::string>& gold_by_sample,
                          const LabelSpace& space);

struct ChartBar {
    std::string group;
    std::string series;
    double value = 0.0;
};

/// Writes report.json plus one bar chart (chart_<task>.svg) per dataset
/// appearing in the reports. Returns the paths written. Throws IoFailure.
std::vector<std::filesystem::path> emit_report(std::span<const EvalReport> reports, std::span<const ComparisonRow> rows,
                                               std::span<const VoteTally> tallies, const std::filesystem::path& out_dir);

/// Grouped bar chart with value labels on top of each bar.
std::string render_bar_chart(std::string_view title, std::span<const ChartBar> bars);

json report_document(std::span<const EvalReport> reports, std::span<const ComparisonRow> rows,
                     std::span<const VoteTally> tallies);

}  // namespace modalign
