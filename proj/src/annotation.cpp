#include "modalign/annotation.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <sstream>
#include <stdexcept>

#include "modalign/digest.hpp"
#include "modalign/error.hpp"
#include "modalign/rng.hpp"

namespace modalign {

const std::string_view kAnnotationCriteria =
    "Read the post and both explanations, then choose the explanation you prefer overall.\n"
    "Clarity: the explanation is easy to follow and states plainly who or what the post targets.\n"
    "Reasoning: the explanation walks through the post step by step and its conclusion follows from that.\n"
    "Alignment: the explanation applies the definition of the given label to this post.";

namespace {

namespace fs = std::filesystem;

std::string system_clock_iso() {
    const auto now = std::chrono::system_clock::now();
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    const auto n = std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    std::snprintf(buf + n, sizeof buf - n, ".%03dZ", static_cast<int>(ms));
    return buf;
}

std::string csv_field(std::string_view value) {
    if (value.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(value);
    std::string out = "\"";
    for (char c : value) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace

json AnnotationSample::to_json() const {
    return {{"sample_id", sample_id},         {"post", post},       {"gold_label", gold_label},
            {"model_a", model_a},             {"explanation_a", explanation_a},
            {"model_b", model_b},             {"explanation_b", explanation_b}};
}

AnnotationSample AnnotationSample::from_json(const json& doc) {
    try {
        return {doc.at("sample_id").get<std::string>(),     doc.at("post").get<std::string>(),
                doc.at("gold_label").get<std::string>(),    doc.at("model_a").get<std::string>(),
                doc.at("explanation_a").get<std::string>(), doc.at("model_b").get<std::string>(),
                doc.at("explanation_b").get<std::string>()};
    } catch (const json::exception& e) {
        throw MalformedRecord(std::string("annotation sample: ") + e.what());
    }
}

std::vector<AnnotationSample> annotation_samples(const LabelConsistentSamples& samples, std::string_view model_a,
                                                 std::string_view model_b) {
    std::vector<AnnotationSample> out;
    out.reserve(samples.samples.size());
    for (const auto& s : samples.samples) {
        out.push_back({s.example.post.id, s.example.post.text, s.example.gold_label, std::string(model_a),
                       s.a.parsed.explanation.empty() ? s.a.completion : s.a.parsed.explanation, std::string(model_b),
                       s.b.parsed.explanation.empty() ? s.b.completion : s.b.parsed.explanation});
    }
    return out;
}

std::string_view to_string(Choice choice) { return choice == Choice::First ? "FIRST" : "SECOND"; }

Choice parse_choice(std::string_view text) {
    std::string upper;
    for (char c : text) upper += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (upper == "FIRST" || upper == "1") return Choice::First;
    if (upper == "SECOND" || upper == "2") return Choice::Second;
    throw std::invalid_argument("choice must be FIRST or SECOND");
}

json AnnotationItem::client_json() const {
    return {{"status", "ITEM"},
            {"batch_id", batch_id},
            {"sample_id", sample_id},
            {"post", post},
            {"label", gold_label},
            {"explanation_1", explanation_first},
            {"explanation_2", explanation_second},
            {"criteria", criteria}};
}

json ServeResult::client_json() const {
    json doc = item ? item->client_json() : json{{"status", "DONE"}};
    doc["progress"] = {{"answered", answered}, {"assigned", assigned}};
    return doc;
}

json StoredVote::to_json() const {
    return {{"batch_id", batch_id},   {"sample_id", sample_id},   {"annotator_id", annotator_id},
            {"choice", to_string(choice)}, {"resolved_model", resolved_model}, {"gold_label", gold_label},
            {"timestamp", timestamp}, {"seq", seq}};
}

StoredVote StoredVote::from_json(const json& doc) {
    return {doc.at("batch_id").get<std::string>(),
            doc.at("sample_id").get<std::string>(),
            doc.at("annotator_id").get<std::string>(),
            parse_choice(doc.at("choice").get<std::string>()),
            doc.at("resolved_model").get<std::string>(),
            doc.at("gold_label").get<std::string>(),
            doc.at("timestamp").get<std::string>(),
            doc.at("seq").get<std::uint64_t>()};
}

// ---------------------------------------------------------------------------

AnnotationService::AnnotationService(Options options) : options_(std::move(options)) {
    if (!options_.clock) options_.clock = system_clock_iso;
    if (options_.snapshot_every == 0) options_.snapshot_every = 1;
    if (options_.data_dir) {
        fs::create_directories(*options_.data_dir);
        replay();
        log_.open(*options_.data_dir / "log.jsonl", std::ios::app | std::ios::binary);
        if (!log_) throw IoFailure("cannot open " + (*options_.data_dir / "log.jsonl").string());
    }
}

AnnotationService::~AnnotationService() = default;

AnnotationService::Options AnnotationService::options_from_environment() {
    Options options;
    if (const char* seed = std::getenv("MODALIGN_SERVICE_SEED"); seed && *seed) {
        try {
            std::size_t used = 0;
            options.seed = std::stoull(seed, &used);
            if (used != std::string_view(seed).size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw InvalidConfig(std::string("MODALIGN_SERVICE_SEED is not an unsigned integer: ") + seed);
        }
    }
    if (const char* dir = std::getenv("MODALIGN_DATA_DIR"); dir && *dir) options.data_dir = dir;
    return options;
}

bool AnnotationService::order_flip(std::uint64_t seed, std::string_view sample_id, std::string_view annotator_id) {
    const auto key = fnv1a(annotator_id, fnv1a("\x1f", fnv1a(sample_id)));
    return (mix_seed(seed, key) >> 7) & 1U;
}

void AnnotationService::record(json event) {
    event["seq"] = ++seq_;
    if (log_.is_open()) {
        log_ << event.dump() << '\n';
        log_.flush();
        if (!log_) throw IoFailure("cannot append to annotation log");
    }
    apply(event);
    if (options_.data_dir && ++events_since_snapshot_ >= options_.snapshot_every) {
        write_file_atomic(*options_.data_dir / "snapshot.json", state_json().dump());
        events_since_snapshot_ = 0;
    }
}

void AnnotationService::apply(const json& event) {
    const auto type = event.at("type").get<std::string>();
    if (type == "batch") {
        Batch batch;
        batch.id = event.at("batch_id").get<std::string>();
        batch.assignments_per_item = event.at("assignments").get<int>();
        for (const auto& s : event.at("samples")) {
            batch.index[s.at("sample_id").get<std::string>()] = batch.items.size();
            batch.items.push_back({AnnotationSample::from_json(s), {}});
        }
        batches_.push_back(std::move(batch));
    } else if (type == "annotator") {
        AnnotatorProfile profile{event.at("annotator_id").get<std::string>(),
                                 event.value("demographics", std::map<std::string, std::string>{})};
        annotators_[profile.annotator_id].profile = std::move(profile);
    } else if (type == "claim") {
        const auto b = event.at("batch").get<std::size_t>();
        const auto i = event.at("item").get<std::size_t>();
        const auto& who = event.at("annotator_id").get_ref<const std::string&>();
        batches_.at(b).items.at(i).assignees.push_back(who);
        annotators_.at(who).claims.push_back({b, i, false});
    } else if (type == "vote") {
        auto vote = StoredVote::from_json(event.at("vote"));
        auto& ann = annotators_.at(vote.annotator_id);
        for (auto& claim : ann.claims) {
            const auto& batch = batches_.at(claim.batch);
            if (!claim.answered && batch.id == vote.batch_id && batch.items[claim.item].sample.sample_id == vote.sample_id) {
                claim.answered = true;
                break;
            }
        }
        votes_.push_back(std::move(vote));
    } else {
        throw IoFailure("unknown annotation log event '" + type + "'");
    }
}

json AnnotationService::state_json() const {
    json batches = json::array();
    for (const auto& b : batches_) {
        json items = json::array();
        for (const auto& item : b.items) items.push_back({{"sample", item.sample.to_json()}, {"assignees", item.assignees}});
        batches.push_back({{"batch_id", b.id}, {"assignments", b.assignments_per_item}, {"items", items}});
    }
    json annotators = json::array();
    for (const auto& [id, a] : annotators_) {
        json claims = json::array();
        for (const auto& c : a.claims) claims.push_back({c.batch, c.item, c.answered});
        annotators.push_back({{"annotator_id", id}, {"demographics", a.profile.demographics}, {"claims", claims}});
    }
    json votes = json::array();
    for (const auto& v : votes_) votes.push_back(v.to_json());
    return {{"seq", seq_}, {"batches", batches}, {"annotators", annotators}, {"votes", votes}};
}

void AnnotationService::load_state(const json& state) {
    seq_ = state.at("seq").get<std::uint64_t>();
    for (const auto& b : state.at("batches")) {
        Batch batch;
        batch.id = b.at("batch_id").get<std::string>();
        batch.assignments_per_item = b.at("assignments").get<int>();
        for (const auto& item : b.at("items")) {
            auto sample = AnnotationSample::from_json(item.at("sample"));
            batch.index[sample.sample_id] = batch.items.size();
            batch.items.push_back({std::move(sample), item.at("assignees").get<std::vector<std::string>>()});
        }
        batches_.push_back(std::move(batch));
    }
    for (const auto& a : state.at("annotators")) {
        Annotator ann;
        ann.profile.annotator_id = a.at("annotator_id").get<std::string>();
        ann.profile.demographics = a.at("demographics").get<std::map<std::string, std::string>>();
        for (const auto& c : a.at("claims"))
            ann.claims.push_back({c.at(0).get<std::size_t>(), c.at(1).get<std::size_t>(), c.at(2).get<bool>()});
        annotators_[ann.profile.annotator_id] = std::move(ann);
    }
    for (const auto& v : state.at("votes")) {
        votes_.push_back(StoredVote::from_json(v));
    }
}

void AnnotationService::replay() {
    const auto snapshot_path = *options_.data_dir / "snapshot.json";
    const auto log_path = *options_.data_dir / "log.jsonl";
    try {
        if (fs::exists(snapshot_path)) load_state(json::parse(read_file(snapshot_path)));
    } catch (const json::exception& e) {
        throw IoFailure("corrupt annotation snapshot: " + std::string(e.what()));
    }
    if (!fs::exists(log_path)) return;
    const auto content = read_file(log_path);
    std::size_t start = 0;
    while (start < content.size()) {
        const auto end = content.find('\n', start);
        if (end == std::string::npos) {
            fs::resize_file(log_path, start);
            break;
        }
        const auto line = std::string_view(content).substr(start, end - start);
        start = end + 1;
        if (line.empty()) continue;
        json event;
        try {
            event = json::parse(line);
        } catch (const json::parse_error& e) {
            throw IoFailure("corrupt annotation log: " + std::string(e.what()));
        }
        const auto seq = event.at("seq").get<std::uint64_t>();
        if (seq <= seq_) continue;
        apply(event);
        seq_ = seq;
    }
}

std::string AnnotationService::create_batch(std::vector<AnnotationSample> samples, int assignments_per_item) {
    if (samples.empty()) throw EmptyBatch("create_batch: no samples");
    if (assignments_per_item < 1) throw InvalidConfig("assignments_per_item must be >= 1");
    std::set<std::string> ids;
    json rows = json::array();
    for (const auto& s : samples) {
        if (!ids.insert(s.sample_id).second) throw InvalidConfig("duplicate sample id '" + s.sample_id + "'");
        rows.push_back(s.to_json());
    }
    std::lock_guard lock(mutex_);
    char id[32];
    std::snprintf(id, sizeof id, "batch-%04zu", batches_.size() + 1);
    record({{"type", "batch"}, {"batch_id", id}, {"assignments", assignments_per_item}, {"samples", rows}});
    return id;
}

std::string AnnotationService::register_annotator(AnnotatorProfile profile) {
    std::lock_guard lock(mutex_);
    if (profile.annotator_id.empty()) {
        for (std::size_t n = annotators_.size();; ++n) {
            auto candidate = "ann-" + short_digest(std::to_string(options_.seed) + ":" + std::to_string(n) + ":" +
                                                   options_.clock())
                                          .substr(0, 12);
            if (!annotators_.contains(candidate)) {
                profile.annotator_id = std::move(candidate);
                break;
            }
        }
    }
    record({{"type", "annotator"}, {"annotator_id", profile.annotator_id}, {"demographics", profile.demographics}});
    return profile.annotator_id;
}

AnnotationItem AnnotationService::make_item(const Batch& batch, const Item& item, const std::string& annotator_id) const {
    AnnotationItem out;
    out.batch_id = batch.id;
    out.sample_id = item.sample.sample_id;
    out.post = item.sample.post;
    out.gold_label = item.sample.gold_label;
    out.criteria = std::string(kAnnotationCriteria);
    out.order_flip = order_flip(options_.seed, out.sample_id, annotator_id);
    out.explanation_first = out.order_flip ? item.sample.explanation_b : item.sample.explanation_a;
    out.explanation_second = out.order_flip ? item.sample.explanation_a : item.sample.explanation_b;
    return out;
}

ServeResult AnnotationService::serve_next(const std::string& annotator_id) {
    std::lock_guard lock(mutex_);
    auto it = annotators_.find(annotator_id);
    if (it == annotators_.end()) throw UnknownAnnotator("unknown annotator '" + annotator_id + "'");
    auto& ann = it->second;
    ServeResult result;
    result.assigned = ann.claims.size();
    result.answered = static_cast<std::size_t>(
        std::count_if(ann.claims.begin(), ann.claims.end(), [](const Claim& c) { return c.answered; }));
    for (const auto& claim : ann.claims) {
        if (!claim.answered) {
            result.item = make_item(batches_[claim.batch], batches_[claim.batch].items[claim.item], annotator_id);
            return result;
        }
    }
    if (options_.max_items_per_annotator && ann.claims.size() >= *options_.max_items_per_annotator) return result;

    std::vector<std::pair<std::size_t, std::size_t>> eligible;
    for (std::size_t b = 0; b < batches_.size(); ++b) {
        const auto& batch = batches_[b];
        for (std::size_t i = 0; i < batch.items.size(); ++i) {
            const auto& assignees = batch.items[i].assignees;
            if (assignees.size() >= static_cast<std::size_t>(batch.assignments_per_item)) continue;
            if (std::find(assignees.begin(), assignees.end(), annotator_id) != assignees.end()) continue;
            eligible.emplace_back(b, i);
        }
    }
    if (eligible.empty()) return result;
    Rng rng(mix_seed(options_.seed, fnv1a(annotator_id) + ann.claims.size()));
    const auto [b, i] = eligible[static_cast<std::size_t>(rng.below(eligible.size()))];
    record({{"type", "claim"}, {"annotator_id", annotator_id}, {"batch", b}, {"item", i}});
    ++result.assigned;
    result.item = make_item(batches_[b], batches_[b].items[i], annotator_id);
    return result;
}

StoredVote AnnotationService::submit_vote(const std::string& annotator_id, const std::string& sample_id, Choice choice) {
    std::lock_guard lock(mutex_);
    auto it = annotators_.find(annotator_id);
    if (it == annotators_.end()) throw UnknownAnnotator("unknown annotator '" + annotator_id + "'");
    const Claim* open = nullptr;
    bool answered = false;
    for (const auto& claim : it->second.claims) {
        if (batches_[claim.batch].items[claim.item].sample.sample_id != sample_id) continue;
        if (claim.answered) answered = true;
        else if (!open) open = &claim;
    }
    if (!open) {
        if (answered) throw DuplicateVote("annotator '" + annotator_id + "' already voted on '" + sample_id + "'");
        throw NotAssigned("sample '" + sample_id + "' is not assigned to annotator '" + annotator_id + "'");
    }
    const auto& batch = batches_[open->batch];
    const auto& sample = batch.items[open->item].sample;
    const bool flip = order_flip(options_.seed, sample_id, annotator_id);
    const bool picked_a = (choice == Choice::First) != flip;
    StoredVote vote{batch.id,
                    sample_id,
                    annotator_id,
                    choice,
                    picked_a ? sample.model_a : sample.model_b,
                    sample.gold_label,
                    options_.clock(),
                    seq_ + 1};
    record({{"type", "vote"}, {"vote", vote.to_json()}});
    return vote;
}

const AnnotationService::Batch& AnnotationService::batch_or_throw(const std::string& batch_id) const {
    for (const auto& b : batches_)
        if (b.id == batch_id) return b;
    throw UnknownBatch("unknown batch '" + batch_id + "'");
}

std::vector<StoredVote> AnnotationService::votes(const std::string& batch_id) const {
    std::lock_guard lock(mutex_);
    batch_or_throw(batch_id);
    std::vector<StoredVote> out;
    for (const auto& v : votes_)
        if (v.batch_id == batch_id) out.push_back(v);
    std::sort(out.begin(), out.end(), [](const StoredVote& a, const StoredVote& b) {
        return std::tie(a.sample_id, a.timestamp, a.seq) < std::tie(b.sample_id, b.timestamp, b.seq);
    });
    return out;
}

std::string AnnotationService::export_votes(const std::string& batch_id, ExportFormat format) const {
    const auto rows = votes(batch_id);
    std::ostringstream out;
    if (format == ExportFormat::Csv) {
        out << "sample_id,annotator_id,resolved_model,gold_label,timestamp\n";
        for (const auto& v : rows) {
            out << csv_field(v.sample_id) << ',' << csv_field(v.annotator_id) << ',' << csv_field(v.resolved_model)
                << ',' << csv_field(v.gold_label) << ',' << csv_field(v.timestamp) << '\n';
        }
    } else {
        for (const auto& v : rows) {
            const nlohmann::ordered_json row = {{"sample_id", v.sample_id},
                                                {"annotator_id", v.annotator_id},
                                                {"resolved_model", v.resolved_model},
                                                {"gold_label", v.gold_label},
                                                {"timestamp", v.timestamp}};
            out << row.dump() << '\n';
        }
    }
    return out.str();
}

std::map<std::string, std::string> AnnotationService::gold_labels(const std::string& batch_id) const {
    std::lock_guard lock(mutex_);
    std::map<std::string, std::string> out;
    for (const auto& item : batch_or_throw(batch_id).items) out[item.sample.sample_id] = item.sample.gold_label;
    return out;
}

std::vector<std::string> AnnotationService::batch_ids() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& b : batches_) out.push_back(b.id);
    return out;
}

BatchStatus AnnotationService::status(const std::string& batch_id) const {
    std::lock_guard lock(mutex_);
    const auto& batch = batch_or_throw(batch_id);
    BatchStatus s{batch.id, batch.items.size(), batch.assignments_per_item, 0, 0};
    for (const auto& item : batch.items) s.claimed += item.assignees.size();
    s.votes = static_cast<std::size_t>(
        std::count_if(votes_.begin(), votes_.end(), [&](const StoredVote& v) { return v.batch_id == batch_id; }));
    return s;
}

json AnnotationService::demographics_summary() const {
    std::lock_guard lock(mutex_);
    std::map<std::string, std::map<std::string, std::size_t>> counts;
    for (const auto& [_, a] : annotators_)
        for (const auto& [key, value] : a.profile.demographics) ++counts[key][value];
    return {{"annotators", annotators_.size()}, {"demographics", counts}};
}

void AnnotationService::snapshot() {
    std::lock_guard lock(mutex_);
    if (!options_.data_dir) return;
    write_file_atomic(*options_.data_dir / "snapshot.json", state_json().dump());
    events_since_snapshot_ = 0;
}

}  // namespace modalign
