#include "modalign/backend.hpp"

#include <algorithm>
#include <atomic>
#include <iterator>
#include <cctype>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "modalign/digest.hpp"
#include "modalign/error.hpp"

namespace modalign {

std::string_view to_string(TrainingMethod method) {
    switch (method) {
        case TrainingMethod::SFT: return "SFT";
        case TrainingMethod::DPO: return "DPO";
        case TrainingMethod::KTO: return "KTO";
    }
    return "?";
}

TrainingMethod parse_training_method(std::string_view text) {
    std::string upper(text);
    std::transform(upper.begin(), upper.end(), upper.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (upper == "SFT") return TrainingMethod::SFT;
    if (upper == "DPO") return TrainingMethod::DPO;
    if (upper == "KTO") return TrainingMethod::KTO;
    throw InvalidTrainingSpec("unknown training method '" + std::string(text) + "'");
}

std::string_view to_string(BackendKind kind) { return kind == BackendKind::Mock ? "mock" : "external"; }

TrainingSpec TrainingSpec::defaults(TrainingMethod method) {
    TrainingSpec spec;
    spec.method = method;
    switch (method) {
        case TrainingMethod::SFT:
            spec.epochs = 3;
            spec.learning_rate = 3e-4;
            spec.loss_variant = "causal_lm";
            break;
        case TrainingMethod::DPO:
            spec.epochs = 3;
            spec.learning_rate = 5e-5;
            spec.beta = 0.1;
            spec.loss_variant = "sigmoid";
            break;
        case TrainingMethod::KTO:
            spec.epochs = 3;
            spec.learning_rate = 5e-7;
            spec.beta = 0.1;
            spec.loss_variant = "kto";
            break;
    }
    return spec;
}

void TrainingSpec::validate() const {
    if (epochs < 1) throw InvalidTrainingSpec("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidTrainingSpec("learning rate must be positive");
    const bool alignment = method != TrainingMethod::SFT;
    if (alignment && !beta) throw InvalidTrainingSpec(std::string(to_string(method)) + " requires beta");
    if (!alignment && beta) throw InvalidTrainingSpec("SFT does not take beta");
    if (beta && !(*beta > 0.0)) throw InvalidTrainingSpec("beta must be positive");
    if (adapter.rank < 1 || adapter.alpha < 1) throw InvalidTrainingSpec("adapter rank and alpha must be >= 1");
    if (adapter.dropout < 0.0 || adapter.dropout >= 1.0) throw InvalidTrainingSpec("adapter dropout must be in [0, 1)");
}

json TrainingSpec::to_json() const {
    json doc = {{"method", to_string(method)},
                {"epochs", epochs},
                {"learning_rate", learning_rate},
                {"adapter",
                 {{"rank", adapter.rank},
                  {"alpha", adapter.alpha},
                  {"dropout", adapter.dropout},
                  {"target_modules", adapter.target_modules}}},
                {"loss_variant", loss_variant}};
    doc["beta"] = beta ? json(*beta) : json(nullptr);
    return doc;
}

TrainingSpec TrainingSpec::from_json(const json& doc) {
    TrainingSpec spec;
    spec.method = parse_training_method(doc.at("method").get<std::string>());
    spec.epochs = doc.at("epochs").get<int>();
    spec.learning_rate = doc.at("learning_rate").get<double>();
    if (doc.contains("beta") && !doc.at("beta").is_null()) spec.beta = doc.at("beta").get<double>();
    if (doc.contains("adapter")) {
        const auto& a = doc.at("adapter");
        spec.adapter.rank = a.value("rank", spec.adapter.rank);
        spec.adapter.alpha = a.value("alpha", spec.adapter.alpha);
        spec.adapter.dropout = a.value("dropout", spec.adapter.dropout);
        if (a.contains("target_modules")) spec.adapter.target_modules = a.at("target_modules").get<std::vector<std::string>>();
    }
    spec.loss_variant = doc.value("loss_variant", std::string{});
    return spec;
}

std::string TrainingSpec::digest() const { return short_digest(to_json().dump()); }

std::vector<std::string> ModelRef::stages() const {
    std::vector<std::string> out;
    out.reserve(lineage.size());
    for (const auto& entry : lineage) out.push_back(entry.stage);
    return out;
}

json ModelRef::to_json() const {
    json entries = json::array();
    for (const auto& e : lineage) {
        entries.push_back({{"stage", e.stage}, {"spec_digest", e.spec_digest}, {"data_digest", e.data_digest}});
    }
    json doc = {{"name", name}, {"lineage", entries}, {"backend_kind", to_string(backend_kind)}};
    doc["checkpoint"] = checkpoint ? json(*checkpoint) : json(nullptr);
    return doc;
}

ModelRef ModelRef::from_json(const json& doc) {
    ModelRef ref;
    ref.name = doc.at("name").get<std::string>();
    for (const auto& e : doc.at("lineage")) {
        ref.lineage.push_back({e.at("stage").get<std::string>(), e.at("spec_digest").get<std::string>(),
                               e.value("data_digest", std::string{})});
    }
    ref.backend_kind = doc.value("backend_kind", std::string("mock")) == "external" ? BackendKind::External
                                                                                     : BackendKind::Mock;
    if (doc.contains("checkpoint") && !doc.at("checkpoint").is_null()) {
        ref.checkpoint = doc.at("checkpoint").get<std::string>();
    }
    return ref;
}

std::string ModelRef::digest() const { return sha256_hex(to_json().dump()); }

std::string TrainingData::digest() const { return short_digest(jsonl); }

std::vector<json> parse_training_data(const TrainingData& data) {
    const std::vector<std::string_view> fields = [&]() -> std::vector<std::string_view> {
        switch (data.method) {
            case TrainingMethod::SFT: return {"completion", "prompt"};
            case TrainingMethod::DPO: return {"chosen", "prompt", "rejected"};
            case TrainingMethod::KTO: return {"completion", "label", "prompt"};
        }
        return {};
    }();
    std::vector<json> rows;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < data.jsonl.size()) {
        auto end = data.jsonl.find('\n', start);
        if (end == std::string::npos) end = data.jsonl.size();
        const auto line = std::string_view(data.jsonl).substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatMismatch("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!row.is_object() || row.size() != fields.size()) {
            throw FormatMismatch("line " + std::to_string(line_no) + ": not a " + std::string(to_string(data.method)) +
                                 " record");
        }
        for (const auto key : fields) {
            auto it = row.find(key);
            const bool ok = it != row.end() && (key == "label" ? it->is_boolean() : it->is_string());
            if (!ok) {
                throw FormatMismatch("line " + std::to_string(line_no) + ": not a " +
                                     std::string(to_string(data.method)) + " record (field '" + std::string(key) + "')");
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<std::string> generate_bounded(Backend& backend, const ModelRef& model, const GenerationRequest& request,
                                          std::size_t chunk_size) {
    chunk_size = std::max<std::size_t>(1, chunk_size);
    const auto total = request.prompts.size();
    const auto n_chunks = (total + chunk_size - 1) / chunk_size;
    if (n_chunks <= 1 || backend.max_in_flight() <= 1) {
        auto out = backend.generate(model, request);
        if (out.size() != total) throw GenerationFailed(out.size(), "backend returned too few completions");
        return out;
    }
    std::vector<std::vector<std::string>> parts(n_chunks);
    auto run_chunk = [&](std::size_t c) {
        GenerationRequest sub;
        sub.max_new_tokens = request.max_new_tokens;
        sub.temperature = request.temperature;
        sub.seed = request.seed;
        const auto begin = c * chunk_size;
        const auto end = std::min(total, begin + chunk_size);
        sub.prompts.assign(request.prompts.begin() + static_cast<std::ptrdiff_t>(begin),
                           request.prompts.begin() + static_cast<std::ptrdiff_t>(end));
        try {
            parts[c] = backend.generate(model, sub);
        } catch (const GenerationFailed& e) {
            throw GenerationFailed(begin + e.index(), e.what());
        }
        if (parts[c].size() != end - begin) throw GenerationFailed(begin + parts[c].size(), "backend returned too few completions");
    };
    const auto width = std::min(backend.max_in_flight(), n_chunks);
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    workers.reserve(width);
    for (std::size_t w = 0; w < width; ++w) {
        workers.emplace_back([&] {
            for (auto c = next++; c < n_chunks; c = next++) {
                try {
                    run_chunk(c);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    next = n_chunks;
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
    std::vector<std::string> out;
    out.reserve(total);
    for (auto& part : parts) std::move(part.begin(), part.end(), std::back_inserter(out));
    return out;
}

// ---------------------------------------------------------------------------
// MockBackend

MockBackend::MockBackend(Options options) : options_(std::move(options)) {
    if (options_.state_dir) std::filesystem::create_directories(*options_.state_dir);
}

std::string MockBackend::fallback_completion(std::string_view prompt) {
    constexpr std::string_view kHeading = "### Definitions:";
    std::string label = "unknown";
    if (auto pos = prompt.find(kHeading); pos != std::string_view::npos) {
        auto line = prompt.substr(pos + kHeading.size());
        while (!line.empty() && (line.front() == '\n' || line.front() == '\r' || line.front() == ' ')) {
            line.remove_prefix(1);
        }
        line = line.substr(0, line.find('\n'));
        if (auto colon = line.find(':'); colon != std::string_view::npos && colon > 0) {
            label = std::string(line.substr(0, colon));
        }
    }
    return "EXPLANATION: fallback. LABEL: " + label;
}

std::shared_ptr<const MockBackend::Table> MockBackend::table_for(const ModelRef& model) {
    if (model.lineage.empty()) return std::make_shared<const Table>();
    const auto key = model.digest();
    std::lock_guard lock(mutex_);
    if (auto it = tables_.find(key); it != tables_.end()) return it->second;
    if (options_.state_dir) {
        const auto path = *options_.state_dir / (key + ".json");
        if (std::filesystem::exists(path)) {
            auto table = std::make_shared<Table>(json::parse(read_file(path)).get<Table>());
            tables_.emplace(key, table);
            return table;
        }
    }
    throw BackendUnavailable("mock backend has no state for model '" + model.name + "' (" + key.substr(0, 16) + ")");
}

std::vector<std::string> MockBackend::generate(const ModelRef& model, const GenerationRequest& request) {
    {
        std::lock_guard lock(mutex_);
        if (failing_generation_.count(model.name) && !request.prompts.empty()) {
            throw GenerationFailed(0, "injected failure for model '" + model.name + "'");
        }
    }
    const auto table = table_for(model);
    std::vector<std::string> out;
    out.reserve(request.prompts.size());
    for (const auto& prompt : request.prompts) {
        auto it = table->find(prompt.text);
        out.push_back(it != table->end() ? it->second : fallback_completion(prompt.text));
    }
    return out;
}

ModelRef MockBackend::train(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                            std::string_view stage) {
    spec.validate();
    if (data.method != spec.method) {
        throw FormatMismatch(std::string(to_string(data.method)) + " data given to " +
                             std::string(to_string(spec.method)) + " training");
    }
    {
        std::lock_guard lock(mutex_);
        if (failing_training_.count(model.name)) {
            throw BackendUnavailable("injected training failure for model '" + model.name + "'");
        }
    }
    const auto rows = parse_training_data(data);
    auto table = std::make_shared<Table>(*table_for(model));
    for (const auto& row : rows) {
        const auto& prompt = row.at("prompt").get_ref<const std::string&>();
        switch (spec.method) {
            case TrainingMethod::SFT: (*table)[prompt] = row.at("completion").get<std::string>(); break;
            case TrainingMethod::DPO: (*table)[prompt] = row.at("chosen").get<std::string>(); break;
            case TrainingMethod::KTO:
                if (row.at("label").get<bool>()) (*table)[prompt] = row.at("completion").get<std::string>();
                break;
        }
    }
    ModelRef trained = model;
    trained.backend_kind = BackendKind::Mock;
    trained.lineage.push_back({std::string(stage), spec.digest(), data.digest()});
    const auto key = trained.digest();
    if (options_.state_dir) write_file_atomic(*options_.state_dir / (key + ".json"), json(*table).dump());
    std::lock_guard lock(mutex_);
    tables_[key] = std::move(table);
    return trained;
}

void MockBackend::inject_generation_failure(std::string name) {
    std::lock_guard lock(mutex_);
    failing_generation_.insert(std::move(name));
}

void MockBackend::inject_training_failure(std::string name) {
    std::lock_guard lock(mutex_);
    failing_training_.insert(std::move(name));
}

// ---------------------------------------------------------------------------
// ExternalBackend

ExternalBackend::ExternalBackend(Options options) : options_(std::move(options)) {}

ExternalBackend ExternalBackend::from_environment() {
    const char* root = std::getenv("MODALIGN_ADAPTER_ROOT");
    const char* endpoint = std::getenv("MODALIGN_ADAPTER_ENDPOINT");
    if (!root || !endpoint) {
        throw BackendUnavailable("MODALIGN_ADAPTER_ROOT and MODALIGN_ADAPTER_ENDPOINT must be set");
    }
    Options options;
    options.root = root;
    options.endpoint = endpoint;
    return ExternalBackend(std::move(options));
}

std::string ExternalBackend::job_id(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                                    std::string_view stage) {
    const json key = {{"model", model.to_json()}, {"spec", spec.to_json()}, {"data", data.digest()}, {"stage", stage}};
    return short_digest(key.dump());
}

std::vector<std::string> ExternalBackend::generate(const ModelRef& model, const GenerationRequest& request) {
    httplib::Client client(options_.endpoint);
    client.set_read_timeout(std::chrono::minutes(30));
    std::vector<std::string> out;
    out.reserve(request.prompts.size());
    const auto batch = std::max<std::size_t>(1, options_.batch_size);
    for (std::size_t begin = 0; begin < request.prompts.size(); begin += batch) {
        const auto end = std::min(request.prompts.size(), begin + batch);
        json prompts = json::array();
        for (std::size_t i = begin; i < end; ++i) prompts.push_back(request.prompts[i].text);
        const json body = {{"model", model.to_json()},
                           {"prompts", prompts},
                           {"max_new_tokens", request.max_new_tokens},
                           {"temperature", request.temperature},
                           {"seed", request.seed}};
        auto res = client.Post("/generate", body.dump(), "application/json");
        if (!res) throw BackendUnavailable("generate: " + httplib::to_string(res.error()));
        if (res->status >= 500) throw BackendUnavailable("generate: HTTP " + std::to_string(res->status));
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::parse_error& e) {
            throw GenerationFailed(begin, std::string("unparseable reply: ") + e.what());
        }
        if (res->status != 200) {
            const auto index = reply.value("index", std::size_t{0});
            throw GenerationFailed(begin + index, reply.value("message", "HTTP " + std::to_string(res->status)));
        }
        const auto& completions = reply.at("completions");
        if (!completions.is_array() || completions.size() != end - begin) {
            throw GenerationFailed(begin, "reply has " + std::to_string(completions.size()) + " completions for " +
                                              std::to_string(end - begin) + " prompts");
        }
        for (std::size_t i = 0; i < completions.size(); ++i) {
            if (!completions[i].is_string()) throw GenerationFailed(begin + i, "completion is not a string");
            out.push_back(completions[i].get<std::string>());
        }
    }
    return out;
}

ModelRef ExternalBackend::train(const ModelRef& model, const TrainingData& data, const TrainingSpec& spec,
                                std::string_view stage) {
    spec.validate();
    if (data.method != spec.method) {
        throw FormatMismatch(std::string(to_string(data.method)) + " data given to " +
                             std::string(to_string(spec.method)) + " training");
    }
    parse_training_data(data);
    const auto id = job_id(model, data, spec, stage);
    const auto dir = options_.root / "jobs" / id;
    const auto result_path = dir / "result.json";
    if (!std::filesystem::exists(result_path)) {
        json spec_doc = spec.to_json();
        spec_doc["job_id"] = id;
        spec_doc["stage"] = stage;
        spec_doc["base_model"] = model.to_json();
        spec_doc["data_digest"] = data.digest();
        write_file_atomic(dir / "data.jsonl", data.jsonl);
        write_file_atomic(dir / "spec.json", spec_doc.dump(2));
    }
    const auto deadline = std::chrono::steady_clock::now() + options_.train_timeout;
    while (!std::filesystem::exists(result_path)) {
        if (std::chrono::steady_clock::now() >= deadline) {
            throw BackendUnavailable("training job " + id + " timed out");
        }
        std::this_thread::sleep_for(options_.poll_interval);
    }
    json result;
    try {
        result = json::parse(read_file(result_path));
    } catch (const json::parse_error& e) {
        throw BackendUnavailable("training job " + id + ": unreadable result.json: " + e.what());
    }
    if (result.value("status", std::string{}) != "succeeded") {
        throw BackendUnavailable("training job " + id + " failed: " + result.value("message", std::string("no message")));
    }
    ModelRef trained = model;
    trained.backend_kind = BackendKind::External;
    trained.lineage.push_back({std::string(stage), spec.digest(), data.digest()});
    trained.checkpoint = result.at("checkpoint").get<std::string>();
    return trained;
}

}  // namespace modalign
