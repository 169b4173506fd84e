#include "modalign/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "assets.hpp"
#include "modalign/error.hpp"
#include "modalign/rng.hpp"

namespace modalign {

namespace {

std::string fold(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool is_word_byte(unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; }

bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

bool starts_with_ci(std::string_view text, std::size_t at, std::string_view prefix) {
    if (text.size() - at < prefix.size()) return false;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(text[at + i])) != prefix[i]) return false;
    }
    return true;
}

// Length of a URL starting at `at`, or 0. Recognizes scheme://... and www....
std::size_t url_length_at(std::string_view text, std::size_t at) {
    auto run_to_space = [&](std::size_t from) {
        std::size_t end = from;
        while (end < text.size() && !is_space(static_cast<unsigned char>(text[end]))) ++end;
        return end - at;
    };
    if (starts_with_ci(text, at, "www.")) return run_to_space(at + 4);
    if (!std::isalpha(static_cast<unsigned char>(text[at]))) return 0;
    std::size_t i = at + 1;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        if (std::isalnum(c) || c == '+' || c == '.' || c == '-') {
            ++i;
            continue;
        }
        break;
    }
    if (text.substr(i, 3) == "://") return run_to_space(i + 3);
    return 0;
}

std::string collapse_whitespace(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (unsigned char c : text) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(c));
    }
    return out;
}

std::string require_string(const json& row, const char* key, std::size_t line) {
    auto it = row.find(key);
    if (it == row.end()) throw MalformedRecord("line " + std::to_string(line) + ": missing field '" + key + "'");
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer() && std::string_view(key) == "id") return std::to_string(it->get<long long>());
    throw MalformedRecord("line " + std::to_string(line) + ": field '" + key + "' must be a string");
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

// Indices of `source` grouped by label-space order, each group in input order.
std::vector<std::vector<std::size_t>> group_by_label(const std::vector<LabeledExample>& source,
                                                     const LabelSpace& space) {
    std::vector<std::vector<std::size_t>> groups(space.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
        const auto idx = space.index_of(source[i].gold_label);
        if (!idx) throw UnknownLabel("label '" + source[i].gold_label + "' of post " + source[i].post.id);
        groups[*idx].push_back(i);
    }
    return groups;
}

std::uint64_t class_stream(std::uint64_t seed, SplitTag tag, std::string_view label) {
    return mix_seed(seed, fnv1a(label, fnv1a(to_string(tag))));
}

// Per-class window [begin, begin + k) of a seeded permutation of the class.
ShotPool sample_window(const std::vector<LabeledExample>& source, SplitTag tag, const LabelSpace& space, int k,
                       std::size_t begin, std::uint64_t seed, SamplingMode mode) {
    if (k < 1) throw InvalidConfig("k must be >= 1, got " + std::to_string(k));
    const auto groups = group_by_label(source, space);
    ShotPool pool;
    pool.k = k;
    pool.source_split = tag;
    pool.seed = seed;
    const auto want = static_cast<std::size_t>(k);
    for (std::size_t c = 0; c < groups.size(); ++c) {
        const auto& members = groups[c];
        const auto& label = space.name_at(c);
        if (members.size() < begin + want) {
            if (mode == SamplingMode::Strict) {
                throw ClassExhausted("label '" + label + "' has " + std::to_string(members.size()) +
                                     " members, need " + std::to_string(begin + want));
            }
            pool.deficient_labels.push_back(label);
        }
        Rng rng(class_stream(seed, tag, label));
        const auto order = rng.permutation(members.size());
        const auto end = std::min(members.size(), begin + want);
        for (std::size_t i = begin; i < end; ++i) pool.examples.push_back(source[members[order[i]]]);
    }
    return pool;
}

}  // namespace

LabelSpace::LabelSpace(std::string task_name, std::vector<LabelDefinition> labels)
    : task_name_(std::move(task_name)), labels_(std::move(labels)) {
    if (labels_.empty()) throw InvalidLabelSpace("task '" + task_name_ + "' has no labels");
    std::unordered_set<std::string> seen;
    for (const auto& entry : labels_) {
        if (entry.name.empty()) throw InvalidLabelSpace("empty label name in task '" + task_name_ + "'");
        if (!seen.insert(fold(entry.name)).second) throw InvalidLabelSpace("duplicate label '" + entry.name + "'");
        if (entry.definition.empty()) throw InvalidLabelSpace("label '" + entry.name + "' has no definition");
    }
}

std::vector<std::string> LabelSpace::names() const {
    std::vector<std::string> out;
    out.reserve(labels_.size());
    for (const auto& entry : labels_) out.push_back(entry.name);
    return out;
}

std::optional<std::size_t> LabelSpace::index_of(std::string_view label) const {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (labels_[i].name == label) return i;
    }
    return std::nullopt;
}

const std::string& LabelSpace::definition(std::string_view label) const {
    const auto idx = index_of(label);
    if (!idx) throw UnknownLabel("label '" + std::string(label) + "' is not in task '" + task_name_ + "'");
    return labels_[*idx].definition;
}

std::optional<std::string> LabelSpace::canonical(std::string_view label) const {
    if (const auto idx = index_of(label)) return labels_[*idx].name;
    const auto folded = fold(label);
    for (const auto& entry : labels_) {
        if (fold(entry.name) == folded) return entry.name;
    }
    return std::nullopt;
}

LabelSpace LabelSpace::from_json(const json& doc) {
    std::vector<LabelDefinition> labels;
    for (const auto& entry : doc.at("labels")) {
        labels.push_back({entry.at("name").get<std::string>(), entry.at("definition").get<std::string>()});
    }
    return LabelSpace(doc.at("task_name").get<std::string>(), std::move(labels));
}

json LabelSpace::to_json() const {
    json labels = json::array();
    for (const auto& entry : labels_) labels.push_back({{"name", entry.name}, {"definition", entry.definition}});
    return {{"task_name", task_name_}, {"labels", labels}};
}

TaskProfile task_from_json(const json& doc) {
    TaskProfile profile{LabelSpace::from_json(doc), {}, doc.value("k_val", 50), doc.value("k_test", 400)};
    if (doc.contains("split_ratios")) {
        const auto& r = doc.at("split_ratios");
        profile.ratios = {r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>()};
    }
    return profile;
}

std::vector<std::string> builtin_task_keys() { return {"hatexplain", "latent_hate", "implicit_hate"}; }

TaskProfile builtin_task(std::string_view name) {
    std::string key = fold(name);
    std::replace(key.begin(), key.end(), ' ', '_');
    std::replace(key.begin(), key.end(), '-', '_');
    const auto text = assets::task_json(key);
    if (text.empty()) throw UnknownLabel("no built-in task named '" + std::string(name) + "'");
    return task_from_json(json::parse(text));
}

TaskProfile resolve_task(std::string_view name_or_path) {
    const std::filesystem::path path{std::string(name_or_path)};
    if (path.extension() == ".json" && std::filesystem::exists(path)) {
        return task_from_json(json::parse(read_file(path)));
    }
    return builtin_task(name_or_path);
}

std::string_view to_string(SplitTag tag) {
    switch (tag) {
        case SplitTag::Train: return "train";
        case SplitTag::Val: return "val";
        case SplitTag::Test: return "test";
    }
    return "unknown";
}

const std::vector<LabeledExample>& DatasetSplit::part(SplitTag tag) const {
    switch (tag) {
        case SplitTag::Train: return train;
        case SplitTag::Val: return val;
        case SplitTag::Test: return test;
    }
    return train;
}

std::string anonymize(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const bool at_boundary = i == 0 || !is_word_byte(static_cast<unsigned char>(text[i - 1]));
        if (at_boundary) {
            if (const auto len = url_length_at(text, i); len > 0) {
                out.push_back(' ');
                i += len;
                continue;
            }
            if (text[i] == '@' && i + 1 < text.size() && is_word_byte(static_cast<unsigned char>(text[i + 1]))) {
                std::size_t end = i + 1;
                while (end < text.size() && is_word_byte(static_cast<unsigned char>(text[end]))) ++end;
                out += "<user>";
                i = end;
                continue;
            }
        }
        out.push_back(text[i]);
        ++i;
    }
    return collapse_whitespace(out);
}

json to_json(const LabeledExample& example) {
    json row = {{"id", example.post.id}, {"text", example.post.text}, {"label", example.gold_label}};
    if (example.seed_explanation) row["explanation"] = *example.seed_explanation;
    if (example.post.platform) row["platform"] = *example.post.platform;
    return row;
}

std::vector<json> to_json(const std::vector<LabeledExample>& examples) {
    std::vector<json> rows;
    rows.reserve(examples.size());
    for (const auto& ex : examples) rows.push_back(to_json(ex));
    return rows;
}

namespace {

LabeledExample parse_example(const json& row, const LabelSpace& space, std::size_t line) {
    if (!row.is_object()) throw MalformedRecord("line " + std::to_string(line) + ": expected a JSON object");
    LabeledExample ex;
    ex.post.id = require_string(row, "id", line);
    if (ex.post.id.empty()) throw MalformedRecord("line " + std::to_string(line) + ": empty id");
    ex.post.text = anonymize(require_string(row, "text", line));
    const auto label = require_string(row, "label", line);
    const auto canonical = space.canonical(label);
    if (!canonical) {
        throw UnknownLabel("line " + std::to_string(line) + ": label '" + label + "' is not in task '" +
                           space.task_name() + "'");
    }
    ex.gold_label = *canonical;
    if (auto it = row.find("explanation"); it != row.end() && !it->is_null()) {
        if (!it->is_string()) throw MalformedRecord("line " + std::to_string(line) + ": explanation must be a string");
        auto text = trim(it->get<std::string>());
        if (!text.empty()) ex.seed_explanation = std::move(text);
    }
    if (auto it = row.find("platform"); it != row.end() && it->is_string()) ex.post.platform = it->get<std::string>();
    return ex;
}

}  // namespace

LabeledExample example_from_json(const json& row, const LabelSpace& space) { return parse_example(row, space, 0); }

std::vector<LabeledExample> load_dataset(const std::filesystem::path& path, const LabelSpace& space) {
    std::vector<LabeledExample> out;
    std::unordered_set<std::string> ids;
    std::ifstream probe(path);
    if (!probe) throw IoFailure("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(probe, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::parse_error& e) {
            throw MalformedRecord("line " + std::to_string(line_no) + ": " + e.what());
        }
        auto ex = parse_example(row, space, line_no);
        if (!ids.insert(ex.post.id).second) {
            throw MalformedRecord("line " + std::to_string(line_no) + ": duplicate id '" + ex.post.id + "'");
        }
        out.push_back(std::move(ex));
    }
    return out;
}

std::size_t attach_explanations(std::vector<LabeledExample>& examples, const std::filesystem::path& path) {
    std::unordered_map<std::string, std::string> by_id;
    const auto rows = read_jsonl(path, [](std::size_t line, const std::string& msg) {
        throw MalformedRecord("line " + std::to_string(line) + ": " + msg);
    });
    std::size_t line = 0;
    for (const auto& row : rows) {
        ++line;
        by_id[require_string(row, "id", line)] = trim(require_string(row, "explanation", line));
    }
    std::size_t attached = 0;
    for (auto& ex : examples) {
        auto it = by_id.find(ex.post.id);
        if (it == by_id.end() || it->second.empty()) continue;
        ex.seed_explanation = it->second;
        ++attached;
    }
    return attached;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatios& ratios) {
    const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        const double exact = static_cast<double>(n) * r[s];
        const double floored = std::floor(exact + 1e-9);
        sizes[s] = static_cast<std::size_t>(floored);
        frac[s] = std::max(0.0, exact - floored);
        assigned += sizes[s];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t i = 0; assigned < n; i = (i + 1) % 3, ++assigned) ++sizes[order[i]];
    return sizes;
}

DatasetSplit split_dataset(const std::vector<LabeledExample>& examples, const LabelSpace& space,
                           const SplitRatios& ratios, std::uint64_t seed) {
    const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
    if (std::any_of(r.begin(), r.end(), [](double x) { return !(x >= 0.0); }) ||
        std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) {
        throw BadRatios("split ratios must be non-negative and sum to 1");
    }
    std::unordered_set<std::string> ids;
    for (const auto& ex : examples) {
        if (!ids.insert(ex.post.id).second) throw MalformedRecord("duplicate id '" + ex.post.id + "'");
    }

    const auto groups = group_by_label(examples, space);
    const auto totals = split_sizes(examples.size(), ratios);

    // Per-class floors, then hand out the remaining units so that both the
    // per-class totals and the global split sizes are met. Rows with the
    // largest remainder go first and take the columns with the most room,
    // which always succeeds when a fractional solution exists.
    const std::size_t n_classes = groups.size();
    std::vector<std::array<std::size_t, 3>> alloc(n_classes);
    std::vector<std::array<double, 3>> frac(n_classes);
    std::vector<std::size_t> row_left(n_classes);
    std::array<std::ptrdiff_t, 3> col_left{};
    for (std::size_t s = 0; s < 3; ++s) col_left[s] = static_cast<std::ptrdiff_t>(totals[s]);
    for (std::size_t c = 0; c < n_classes; ++c) {
        const auto n_c = groups[c].size();
        std::size_t used = 0;
        for (std::size_t s = 0; s < 3; ++s) {
            const double exact = static_cast<double>(n_c) * r[s];
            const double floored = std::floor(exact + 1e-9);
            alloc[c][s] = static_cast<std::size_t>(floored);
            frac[c][s] = std::max(0.0, exact - floored);
            used += alloc[c][s];
            col_left[s] -= static_cast<std::ptrdiff_t>(alloc[c][s]);
        }
        row_left[c] = n_c - used;
    }
    std::vector<std::size_t> rows(n_classes);
    std::iota(rows.begin(), rows.end(), 0);
    std::stable_sort(rows.begin(), rows.end(), [&](auto a, auto b) { return row_left[a] > row_left[b]; });
    for (const auto c : rows) {
        std::array<std::size_t, 3> cols{0, 1, 2};
        std::stable_sort(cols.begin(), cols.end(), [&](auto a, auto b) {
            if (col_left[a] != col_left[b]) return col_left[a] > col_left[b];
            return frac[c][a] > frac[c][b];
        });
        for (std::size_t i = 0; i < row_left[c]; ++i) {
            const auto s = cols.at(i);
            if (col_left[s] <= 0) throw Error("split apportionment failed");
            ++alloc[c][s];
            --col_left[s];
        }
    }

    std::vector<std::pair<std::size_t, SplitTag>> assignment;
    assignment.reserve(examples.size());
    for (std::size_t c = 0; c < n_classes; ++c) {
        Rng rng(class_stream(seed, SplitTag::Train, space.name_at(c)) ^ 0x5b1d5b1dULL);
        const auto order = rng.permutation(groups[c].size());
        std::size_t pos = 0;
        const SplitTag tags[3] = {SplitTag::Train, SplitTag::Val, SplitTag::Test};
        for (std::size_t s = 0; s < 3; ++s) {
            for (std::size_t j = 0; j < alloc[c][s]; ++j, ++pos) assignment.emplace_back(groups[c][order[pos]], tags[s]);
        }
    }
    std::sort(assignment.begin(), assignment.end());

    DatasetSplit split;
    split.ratios = ratios;
    split.seed = seed;
    for (const auto& [idx, tag] : assignment) {
        auto& target = tag == SplitTag::Train ? split.train : tag == SplitTag::Val ? split.val : split.test;
        target.push_back(examples[idx]);
    }
    return split;
}

ShotPool sample_k_shot(const std::vector<LabeledExample>& source, SplitTag tag, const LabelSpace& space, int k,
                       std::uint64_t seed, SamplingMode mode) {
    return sample_window(source, tag, space, k, 0, seed, mode);
}

ShotPool sample_k_shot(const DatasetSplit& split, const LabelSpace& space, int k, std::uint64_t seed,
                       SamplingMode mode) {
    return sample_window(split.train, SplitTag::Train, space, k, 0, seed, mode);
}

ShotPool sample_complementary(const DatasetSplit& split, const LabelSpace& space, int k, std::uint64_t seed,
                              SamplingMode mode) {
    return sample_window(split.train, SplitTag::Train, space, k, static_cast<std::size_t>(std::max(k, 0)), seed, mode);
}

std::vector<LabeledExample> sample_eval_subset(const DatasetSplit& split, SplitTag tag, const LabelSpace& space,
                                               int k_per_class, std::uint64_t seed, SamplingMode mode) {
    if (tag == SplitTag::Train) throw InvalidConfig("evaluation subsets must come from the val or test split");
    return sample_window(split.part(tag), tag, space, k_per_class, 0, seed, mode).examples;
}

}  // namespace modalign
