#include "modalign/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <functional>
#include <set>
#include <thread>
#include <tuple>

#include "modalign/digest.hpp"
#include "modalign/error.hpp"

namespace modalign {

namespace {

namespace fs = std::filesystem;

std::string now_iso() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

fs::path resolve(const fs::path& base, const std::string& value) {
    fs::path p(value);
    return p.is_relative() && !base.empty() ? base / p : p;
}

void run_parallel(std::size_t jobs, std::size_t width, const std::function<void(std::size_t)>& fn) {
    width = std::max<std::size_t>(1, std::min(width, jobs));
    if (width == 1) {
        for (std::size_t i = 0; i < jobs; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < width; ++w) {
        workers.emplace_back([&] {
            for (auto i = next++; i < jobs; i = next++) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

std::vector<std::string> ids_of(const std::vector<LabeledExample>& examples) {
    std::vector<std::string> ids;
    ids.reserve(examples.size());
    for (const auto& ex : examples) ids.push_back(ex.post.id);
    return ids;
}

int stage_rank(std::string_view stage) {
    if (stage == "aux") return 0;
    if (stage == "stage1") return 1;
    if (stage == "stage2") return 2;
    return 3;
}

auto cell_key(const CellRecord& c) {
    return std::make_tuple(stage_rank(c.stage), c.k, c.model_order, c.partner.value_or(""), c.variant);
}

struct Sweep {
    const RunConfig& config;
    const RunInputs& inputs;
    Backend& backend;
    const HyperparameterRegistry& registry;
    RunRecord& record;
    GenerationOptions gen;
    std::vector<LabeledExample> val_subset;
    std::vector<LabeledExample> test_subset;

    const LabelSpace& space() const { return inputs.task.space; }

    std::optional<fs::path> run_dir() const {
        if (!config.runs_dir) return std::nullopt;
        return *config.runs_dir / record.run_id();
    }

    void append(CellRecord cell) {
        record.append(std::move(cell));
        if (auto dir = run_dir()) record.write_manifest(*dir);
    }

    void persist(const TrainingData& data, std::string_view variant, const ShotPool& pool, std::optional<int> k_prime,
                 std::size_t posts) const {
        const auto dir = run_dir();
        if (!dir) return;
        const auto stem = *dir / "data" / data.digest();
        write_file_atomic(stem.string() + ".jsonl", data.jsonl);
        write_file_atomic(stem.string() + ".json", dataset_manifest(data, variant, pool, k_prime, posts).dump(2));
    }

    StepRecord train(const ModelRef& base, const TrainingData& data, std::size_t records, TrainingMethod method,
                     std::string_view technique, std::string_view stage, const std::string& family, int k,
                     bool evaluate_val) {
        StepRecord step;
        step.stage = std::string(stage);
        step.dataset_digest = data.digest();
        step.records = records;
        step.started_at = now_iso();
        step.hyperparameters = registry.lookup(space().task_name(), family, k, technique);
        auto spec = TrainingSpec::defaults(method);
        spec.epochs = step.hyperparameters.epochs;
        spec.learning_rate = step.hyperparameters.learning_rate;
        step.model = backend.train(base, data, spec, stage);
        if (evaluate_val && !val_subset.empty()) step.val = evaluate(step.model, "");
        step.finished_at = now_iso();
        return step;
    }

    EvalReport evaluate(const ModelRef& model, std::string_view series, bool test = false) const {
        auto report = evaluate_model(backend, model, test ? test_subset : val_subset, space(), gen);
        report.series = std::string(series);
        return report;
    }

    void finish(CellRecord& cell, const ModelRef& model) const {
        if (!val_subset.empty()) {
            cell.val = evaluate(model, cell.variant);
            cell.val->group = "K=" + std::to_string(cell.k);
        }
        if (!test_subset.empty()) {
            cell.test = evaluate(model, cell.variant, true);
            cell.test->group = "K=" + std::to_string(cell.k);
        }
    }
};

Sweep make_sweep(const RunConfig& config, const RunInputs& inputs, Backend& backend,
                 const HyperparameterRegistry& registry, RunRecord& record) {
    Sweep sweep{config, inputs, backend, registry, record, {}, {}, {}};
    sweep.gen.seed = config.generation_seed;
    const auto& space = inputs.task.space;
    const int k_val = config.k_val.value_or(inputs.task.k_val);
    const int k_test = config.k_test.value_or(inputs.task.k_test);
    if (k_val > 0 && !inputs.split.val.empty())
        sweep.val_subset = sample_eval_subset(inputs.split, SplitTag::Val, space, k_val, config.sampling_seed,
                                              SamplingMode::Lenient);
    if (k_test > 0 && !inputs.split.test.empty())
        sweep.test_subset = sample_eval_subset(inputs.split, SplitTag::Test, space, k_test, config.sampling_seed,
                                               SamplingMode::Lenient);
    return sweep;
}

TrainingData sft_data(const std::vector<SftRecord>& records) { return serialize(std::span<const SftRecord>(records)); }

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
    if (models.empty()) throw InvalidConfig("at least one model is required");
    std::set<std::string> names;
    for (const auto& m : models) {
        if (m.name.empty()) throw InvalidConfig("model name must not be empty");
        if (!names.insert(m.name).second) throw InvalidConfig("duplicate model '" + m.name + "'");
    }
    if (k_schedule.empty()) throw InvalidConfig("k_schedule must not be empty");
    for (std::size_t i = 0; i < k_schedule.size(); ++i) {
        if (k_schedule[i] < 1) throw InvalidConfig("k_schedule values must be positive");
        if (i > 0 && k_schedule[i] <= k_schedule[i - 1]) throw InvalidConfig("k_schedule must be strictly increasing");
    }
    if (k_check && std::find(k_schedule.begin(), k_schedule.end(), *k_check) == k_schedule.end())
        throw InvalidConfig("k_check " + std::to_string(*k_check) + " is not in k_schedule");
    if (alignment_method == TrainingMethod::SFT) throw InvalidConfig("alignment_method must be DPO or KTO");
    if (metric != "macro_f1" && metric != "accuracy") throw InvalidConfig("unknown metric '" + metric + "'");
    if (parallel_cells < 1) throw InvalidConfig("parallel_cells must be >= 1");
    if (subsample.at_k < 1) throw InvalidConfig("subsample.at_k must be positive");
    for (int kp : subsample.k_primes)
        if (kp < 1 || kp > subsample.at_k) throw InvalidConfig("subsample k_primes must be in [1, at_k]");
    if (backend != "mock" && backend != "external") throw InvalidConfig("unknown backend '" + backend + "'");
    if (k_val && *k_val < 0) throw InvalidConfig("eval.k_val must be >= 0");
    if (k_test && *k_test < 0) throw InvalidConfig("eval.k_test must be >= 0");
}

void RunConfig::validate_stage2() const {
    validate();
    if (models.size() < 2) throw InvalidConfig("stage 2 needs at least two models");
    if (!k_check) throw InvalidConfig("stage 2 needs k_check");
}

std::string RunConfig::family_of(const ModelSpec& model) const {
    return HyperparameterRegistry::normalize_family(model.family.empty() ? model.name : model.family);
}

json RunConfig::to_json() const {
    json doc;
    doc["task"] = task;
    if (dataset) doc["dataset"] = dataset->string();
    if (explanations) doc["explanations"] = explanations->string();
    if (splits) doc["splits"] = {{"train", splits->train.string()}, {"val", splits->val.string()}, {"test", splits->test.string()}};
    doc["split_seed"] = split_seed;
    json ms = json::array();
    for (const auto& m : models) ms.push_back({{"name", m.name}, {"family", m.family}});
    doc["models"] = ms;
    doc["k_schedule"] = k_schedule;
    doc["alignment_method"] = to_string(alignment_method);
    doc["k_check"] = k_check ? json(*k_check) : json(nullptr);
    doc["metric"] = metric;
    doc["seeds"] = {{"sampling", sampling_seed}, {"generation", generation_seed}};
    if (auxiliary_sft) doc["auxiliary_sft"] = auxiliary_sft->string();
    doc["subsample"] = {{"enabled", subsample.enabled}, {"at_k", subsample.at_k}, {"k_primes", subsample.k_primes}};
    json eval = json::object();
    if (k_val) eval["k_val"] = *k_val;
    if (k_test) eval["k_test"] = *k_test;
    doc["eval"] = eval;
    json be = {{"kind", backend}};
    if (backend_state_dir) be["state_dir"] = backend_state_dir->string();
    doc["backend"] = be;
    if (runs_dir) doc["runs_dir"] = runs_dir->string();
    doc["parallel_cells"] = parallel_cells;
    return doc;
}

RunConfig RunConfig::from_json(const json& doc, const fs::path& base_dir) {
    static const std::set<std::string> known = {"task",         "dataset",   "explanations", "splits",
                                                "split_seed",   "models",    "k_schedule",   "alignment_method",
                                                "k_check",      "metric",    "seeds",        "auxiliary_sft",
                                                "subsample",    "eval",      "backend",      "runs_dir",
                                                "parallel_cells"};
    if (!doc.is_object()) throw InvalidConfig("run config must be a JSON object");
    for (const auto& [key, _] : doc.items())
        if (!known.count(key)) throw InvalidConfig("unknown run config key '" + key + "'");
    RunConfig c;
    try {
        c.task = doc.value("task", c.task);
        if (c.task.ends_with(".json")) c.task = resolve(base_dir, c.task).string();
        if (doc.contains("dataset")) c.dataset = resolve(base_dir, doc.at("dataset").get<std::string>());
        if (doc.contains("explanations")) c.explanations = resolve(base_dir, doc.at("explanations").get<std::string>());
        if (doc.contains("splits")) {
            const auto& s = doc.at("splits");
            c.splits = SplitFiles{resolve(base_dir, s.at("train").get<std::string>()),
                                  resolve(base_dir, s.at("val").get<std::string>()),
                                  resolve(base_dir, s.at("test").get<std::string>())};
        }
        c.split_seed = doc.value("split_seed", c.split_seed);
        for (const auto& m : doc.value("models", json::array())) {
            if (m.is_string()) c.models.push_back({m.get<std::string>(), ""});
            else c.models.push_back({m.at("name").get<std::string>(), m.value("family", std::string{})});
        }
        c.k_schedule = doc.value("k_schedule", std::vector<int>{});
        if (doc.contains("alignment_method"))
            c.alignment_method = parse_training_method(doc.at("alignment_method").get<std::string>());
        if (doc.contains("k_check") && !doc.at("k_check").is_null()) c.k_check = doc.at("k_check").get<int>();
        c.metric = doc.value("metric", c.metric);
        if (doc.contains("seeds")) {
            c.sampling_seed = doc.at("seeds").value("sampling", c.sampling_seed);
            c.generation_seed = doc.at("seeds").value("generation", c.generation_seed);
        }
        if (doc.contains("auxiliary_sft")) c.auxiliary_sft = resolve(base_dir, doc.at("auxiliary_sft").get<std::string>());
        if (doc.contains("subsample")) {
            const auto& s = doc.at("subsample");
            c.subsample.enabled = s.value("enabled", c.subsample.enabled);
            c.subsample.at_k = s.value("at_k", c.subsample.at_k);
            c.subsample.k_primes = s.value("k_primes", c.subsample.k_primes);
        }
        if (doc.contains("eval")) {
            const auto& e = doc.at("eval");
            if (e.contains("k_val")) c.k_val = e.at("k_val").get<int>();
            if (e.contains("k_test")) c.k_test = e.at("k_test").get<int>();
        }
        if (doc.contains("backend")) {
            const auto& b = doc.at("backend");
            if (b.is_string()) {
                c.backend = b.get<std::string>();
            } else {
                c.backend = b.value("kind", c.backend);
                if (b.contains("state_dir")) c.backend_state_dir = resolve(base_dir, b.at("state_dir").get<std::string>());
            }
        }
        if (doc.contains("runs_dir")) c.runs_dir = resolve(base_dir, doc.at("runs_dir").get<std::string>());
        c.parallel_cells = doc.value("parallel_cells", c.parallel_cells);
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("run config: ") + e.what());
    } catch (const InvalidTrainingSpec& e) {
        throw InvalidConfig(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    }
    return from_json(doc, path.parent_path());
}

std::string RunConfig::digest() const { return short_digest(to_json().dump()); }

RunInputs load_inputs(const RunConfig& config) {
    RunInputs inputs{resolve_task(config.task), {}, {}};
    const auto& space = inputs.task.space;
    if (config.splits) {
        inputs.split.train = load_dataset(config.splits->train, space);
        inputs.split.val = load_dataset(config.splits->val, space);
        inputs.split.test = load_dataset(config.splits->test, space);
        inputs.split.ratios = inputs.task.ratios;
        inputs.split.seed = config.split_seed;
        if (config.explanations) attach_explanations(inputs.split.train, *config.explanations);
    } else if (config.dataset) {
        auto examples = load_dataset(*config.dataset, space);
        if (config.explanations) attach_explanations(examples, *config.explanations);
        inputs.split = split_dataset(examples, space, inputs.task.ratios, config.split_seed);
    } else {
        throw InvalidConfig("run config names neither a dataset nor split files");
    }
    if (config.auxiliary_sft) {
        const auto rows = read_jsonl(*config.auxiliary_sft, [&](std::size_t line, const std::string& msg) {
            throw MalformedRecord(config.auxiliary_sft->string() + ":" + std::to_string(line) + ": " + msg);
        });
        std::size_t line = 0;
        for (const auto& row : rows) {
            ++line;
            if (!row.is_object() || !row.contains("prompt") || !row.contains("completion") ||
                !row.at("prompt").is_string() || !row.at("completion").is_string()) {
                throw MalformedRecord(config.auxiliary_sft->string() + ": record " + std::to_string(line) +
                                      " needs string prompt and completion");
            }
            inputs.auxiliary.push_back({row.at("prompt").get<std::string>(), row.at("completion").get<std::string>()});
        }
    }
    return inputs;
}

// ---------------------------------------------------------------------------
// Records

json StepRecord::to_json() const {
    json doc = {{"stage", stage},
                {"dataset_digest", dataset_digest},
                {"records", records},
                {"epochs", hyperparameters.epochs},
                {"learning_rate", hyperparameters.learning_rate},
                {"model", model.to_json()},
                {"model_digest", model.digest()},
                {"started_at", started_at},
                {"finished_at", finished_at}};
    doc["val"] = val ? val->to_json() : json(nullptr);
    return doc;
}

namespace {

StepRecord step_from_json(const json& doc) {
    StepRecord s;
    s.stage = doc.at("stage").get<std::string>();
    s.dataset_digest = doc.at("dataset_digest").get<std::string>();
    s.records = doc.value("records", std::size_t{0});
    s.hyperparameters = {doc.value("epochs", 3), doc.value("learning_rate", 5e-5)};
    s.model = ModelRef::from_json(doc.at("model"));
    if (doc.contains("val") && !doc.at("val").is_null()) s.val = EvalReport::from_json(doc.at("val"));
    s.started_at = doc.value("started_at", std::string{});
    s.finished_at = doc.value("finished_at", std::string{});
    return s;
}

CellRecord cell_from_json(const json& doc) {
    CellRecord c;
    c.stage = doc.at("stage").get<std::string>();
    c.model = doc.at("model").get<std::string>();
    if (doc.contains("partner") && !doc.at("partner").is_null()) c.partner = doc.at("partner").get<std::string>();
    c.k = doc.at("k").get<int>();
    c.variant = doc.at("variant").get<std::string>();
    c.model_order = doc.value("model_order", std::size_t{0});
    c.status = doc.at("status").get<std::string>() == "FAILED" ? CellStatus::Failed : CellStatus::Succeeded;
    c.error = doc.value("error", std::string{});
    for (const auto& s : doc.value("steps", json::array())) c.steps.push_back(step_from_json(s));
    if (doc.contains("val") && !doc.at("val").is_null()) c.val = EvalReport::from_json(doc.at("val"));
    if (doc.contains("test") && !doc.at("test").is_null()) c.test = EvalReport::from_json(doc.at("test"));
    c.pool_ids = doc.value("pool_ids", std::vector<std::string>{});
    return c;
}

}  // namespace

std::string_view to_string(CellStatus status) { return status == CellStatus::Succeeded ? "SUCCEEDED" : "FAILED"; }

const ModelRef* CellRecord::final_model() const { return steps.empty() ? nullptr : &steps.back().model; }

json CellRecord::to_json() const {
    json st = json::array();
    for (const auto& s : steps) st.push_back(s.to_json());
    json doc = {{"stage", stage},   {"model", model},       {"k", k},         {"variant", variant},
                {"model_order", model_order}, {"status", to_string(status)}, {"error", error}, {"steps", st},
                {"pool_ids", pool_ids}};
    doc["partner"] = partner ? json(*partner) : json(nullptr);
    doc["val"] = val ? val->to_json() : json(nullptr);
    doc["test"] = test ? test->to_json() : json(nullptr);
    doc["lineage"] = final_model() ? json(final_model()->stages()) : json::array();
    return doc;
}

RunRecord::RunRecord(std::string run_id, std::string config_digest)
    : run_id_(std::move(run_id)), config_digest_(std::move(config_digest)), created_at_(now_iso()) {}

RunRecord::RunRecord(const RunRecord& other) {
    std::lock_guard lock(other.mutex_);
    run_id_ = other.run_id_;
    config_digest_ = other.config_digest_;
    created_at_ = other.created_at_;
    cells_ = other.cells_;
}

RunRecord& RunRecord::operator=(const RunRecord& other) {
    if (this == &other) return *this;
    std::scoped_lock lock(mutex_, other.mutex_);
    run_id_ = other.run_id_;
    config_digest_ = other.config_digest_;
    created_at_ = other.created_at_;
    cells_ = other.cells_;
    return *this;
}

void RunRecord::append(CellRecord cell) {
    std::lock_guard lock(mutex_);
    cells_.push_back(std::move(cell));
}

std::vector<CellRecord> RunRecord::cells() const {
    std::vector<CellRecord> out;
    {
        std::lock_guard lock(mutex_);
        out = cells_;
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const CellRecord& a, const CellRecord& b) { return cell_key(a) < cell_key(b); });
    return out;
}

std::size_t RunRecord::failed_count() const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(
        std::count_if(cells_.begin(), cells_.end(), [](const CellRecord& c) { return !c.succeeded(); }));
}

std::optional<CellRecord> RunRecord::find(std::string_view stage, std::string_view model, int k,
                                          std::string_view variant) const {
    std::lock_guard lock(mutex_);
    for (const auto& c : cells_) {
        if (c.succeeded() && c.stage == stage && c.model == model && c.k == k && c.variant == variant) return c;
    }
    return std::nullopt;
}

json RunRecord::to_json() const {
    json cs = json::array();
    for (const auto& c : cells()) cs.push_back(c.to_json());
    return {{"run_id", run_id_},
            {"config_digest", config_digest_},
            {"created_at", created_at_},
            {"failed_cells", failed_count()},
            {"cells", cs}};
}

RunRecord RunRecord::from_json(const json& doc) {
    RunRecord r(doc.at("run_id").get<std::string>(), doc.at("config_digest").get<std::string>());
    r.created_at_ = doc.value("created_at", r.created_at_);
    for (const auto& c : doc.at("cells")) r.cells_.push_back(cell_from_json(c));
    return r;
}

void RunRecord::write_manifest(const fs::path& dir) const { write_file_atomic(dir / "manifest.json", to_json().dump(2)); }

// ---------------------------------------------------------------------------
// Stages

EvalReport evaluate_model(Backend& backend, const ModelRef& model, const std::vector<LabeledExample>& examples,
                          const LabelSpace& space, const GenerationOptions& options) {
    if (examples.empty()) throw EmptyInput("evaluate_model: no examples");
    GenerationRequest request;
    request.max_new_tokens = options.max_new_tokens;
    request.temperature = options.temperature;
    request.seed = options.seed;
    for (const auto& ex : examples) request.prompts.push_back(render_classification_prompt(ex.post, space));
    const auto completions = generate_bounded(backend, model, request);
    std::vector<Prediction> predictions;
    predictions.reserve(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i)
        predictions.push_back({examples[i].gold_label, parse_response(completions[i], space)});
    auto report = score(predictions, space);
    report.model_digest = model.digest();
    return report;
}

RunRecord run_stage1(const RunConfig& config, const RunInputs& inputs, Backend& backend,
                     const HyperparameterRegistry& registry) {
    config.validate();
    RunRecord record("stage1-" + config.digest(), config.digest());
    Sweep sweep = make_sweep(config, inputs, backend, registry, record);
    const auto& space = inputs.task.space;
    const auto method = config.alignment_method;
    const std::string method_name(to_string(method));

    std::vector<std::optional<ModelRef>> bases(config.models.size());
    std::vector<std::string> base_errors(config.models.size());
    for (std::size_t m = 0; m < config.models.size(); ++m) {
        const auto& spec = config.models[m];
        auto base = backend.base_model(spec.name);
        if (inputs.auxiliary.empty()) {
            bases[m] = base;
            continue;
        }
        CellRecord cell{"aux", spec.name, std::nullopt, 0, "SFT", m, CellStatus::Succeeded, {}, {}, {}, {}, {}};
        try {
            const auto data = sft_data(inputs.auxiliary);
            cell.steps.push_back(sweep.train(base, data, inputs.auxiliary.size(), TrainingMethod::SFT, "SFT", "AUX",
                                             config.family_of(spec), 0, false));
            bases[m] = cell.steps.back().model;
        } catch (const std::exception& e) {
            cell.status = CellStatus::Failed;
            cell.error = e.what();
            base_errors[m] = std::string("auxiliary SFT failed: ") + e.what();
        }
        sweep.append(std::move(cell));
    }

    for (const int k : config.k_schedule) {
        std::optional<ShotPool> pool;
        std::string pool_error;
        try {
            pool = sample_k_shot(inputs.split, space, k, config.sampling_seed);
        } catch (const std::exception& e) {
            pool_error = e.what();
        }
        const bool with_variants = config.subsample.enabled && method == TrainingMethod::DPO && k == config.subsample.at_k;

        run_parallel(config.models.size(), config.parallel_cells, [&](std::size_t m) {
            const auto& spec = config.models[m];
            const auto family = config.family_of(spec);
            CellRecord cell{"stage1", spec.name, std::nullopt, k, method_name, m, CellStatus::Succeeded, {}, {}, {}, {}, {}};
            std::optional<ConditionedExplanationSet> cset;
            try {
                if (!pool) throw ClassExhausted(pool_error);
                if (!bases[m]) throw BackendUnavailable(base_errors[m]);
                cell.pool_ids = ids_of(pool->examples);

                std::vector<SftRecord> sft;
                sft.reserve(pool->examples.size());
                for (const auto& ex : pool->examples) sft.push_back(build_sft_record(ex, space));
                const auto data = sft_data(sft);
                sweep.persist(data, "SFT", *pool, std::nullopt, pool->examples.size());
                cell.steps.push_back(
                    sweep.train(*bases[m], data, sft.size(), TrainingMethod::SFT, "SFT", "SFT", family, k, true));

                cset = generate_conditioned_explanations(backend, cell.steps.back().model, pool->examples, space,
                                                         sweep.gen);
                TrainingData aligned;
                std::size_t n_records = 0;
                if (method == TrainingMethod::DPO) {
                    const auto pairs = build_dpo_pairs(*cset);
                    aligned = serialize(std::span<const PreferencePair>(pairs));
                    n_records = pairs.size();
                } else {
                    const auto records = build_kto_records(*cset);
                    aligned = serialize(std::span<const ListwiseRecord>(records));
                    n_records = records.size();
                }
                sweep.persist(aligned, method_name, *pool, std::nullopt, pool->examples.size());
                cell.steps.push_back(sweep.train(cell.steps.front().model, aligned, n_records, method, method_name,
                                                 method_name, family, k, true));
                sweep.finish(cell, cell.steps.back().model);
            } catch (const std::exception& e) {
                cell.status = CellStatus::Failed;
                cell.error = e.what();
            }
            const bool parent_ok = cell.succeeded();
            const auto sft_step = cell.steps.empty() ? std::optional<StepRecord>{} : cell.steps.front();
            sweep.append(cell);
            if (!with_variants || !parent_ok) return;

            for (const int kp : config.subsample.k_primes) {
                for (const char kind : {'K', 'N'}) {
                    const std::string variant = std::string("DPO-") + kind + std::to_string(kp);
                    CellRecord vc{"stage1", spec.name, std::nullopt, k, variant, m, CellStatus::Succeeded, {}, {}, {}, {}, {}};
                    vc.pool_ids = ids_of(pool->examples);
                    vc.steps.push_back(*sft_step);
                    try {
                        const auto pairs = kind == 'K' ? subsample_dpo_k(*pool, kp, config.sampling_seed, *cset)
                                                       : subsample_dpo_n(*pool, kp, config.sampling_seed, *cset);
                        const auto data = serialize(std::span<const PreferencePair>(pairs));
                        sweep.persist(data, variant, *pool, kp, pool->examples.size());
                        vc.steps.push_back(sweep.train(sft_step->model, data, pairs.size(), TrainingMethod::DPO, variant,
                                                       "DPO", family, k, true));
                        sweep.finish(vc, vc.steps.back().model);
                    } catch (const std::exception& e) {
                        vc.status = CellStatus::Failed;
                        vc.error = e.what();
                    }
                    sweep.append(std::move(vc));
                }
            }
        });
    }
    if (auto dir = sweep.run_dir()) record.write_manifest(*dir);
    return record;
}

RunRecord run_stage2(const RunConfig& config, const RunInputs& inputs, Backend& backend, const RunRecord& stage1,
                     const HyperparameterRegistry& registry) {
    config.validate_stage2();
    const int kc = *config.k_check;
    const std::string method_name(to_string(config.alignment_method));
    std::vector<ModelRef> checkpoints;
    for (const auto& spec : config.models) {
        const auto cell = stage1.find("stage1", spec.name, kc, method_name);
        if (!cell || !cell->final_model())
            throw MissingCheckpoint("no stage-1 checkpoint for " + spec.name + " at K=" + std::to_string(kc));
        checkpoints.push_back(*cell->final_model());
    }

    RunRecord record("stage2-" + config.digest(), config.digest());
    Sweep sweep = make_sweep(config, inputs, backend, registry, record);
    const auto& space = inputs.task.space;

    std::optional<ShotPool> comp;
    std::string comp_error;
    try {
        comp = sample_complementary(inputs.split, space, kc, config.sampling_seed);
    } catch (const std::exception& e) {
        comp_error = e.what();
    }

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < config.models.size(); ++a)
        for (std::size_t b = 0; b < config.models.size(); ++b)
            if (a != b) pairs.emplace_back(a, b);

    run_parallel(pairs.size(), config.parallel_cells, [&](std::size_t i) {
        const auto [a, b] = pairs[i];
        const auto& spec = config.models[a];
        const auto family = config.family_of(spec);
        CellRecord cell{"stage2", spec.name, config.models[b].name, kc, "XDPO", a, CellStatus::Succeeded, {}, {}, {}, {}, {}};
        try {
            if (!comp) throw ClassExhausted(comp_error);
            cell.pool_ids = ids_of(comp->examples);
            const auto donor = generate_gold_explanations(backend, checkpoints[b], comp->examples, space, sweep.gen);
            std::vector<SftRecord> sft;
            sft.reserve(donor.posts.size());
            for (const auto& post : donor.posts) sft.push_back({post.prompt, chosen_completion(post)});
            const auto data = sft_data(sft);
            sweep.persist(data, "XSFT", *comp, std::nullopt, comp->examples.size());
            cell.steps.push_back(
                sweep.train(checkpoints[a], data, sft.size(), TrainingMethod::SFT, "XSFT", "XSFT", family, kc, true));

            const auto cset =
                generate_conditioned_explanations(backend, cell.steps.back().model, comp->examples, space, sweep.gen);
            const auto dpo = build_dpo_pairs(cset);
            const auto aligned = serialize(std::span<const PreferencePair>(dpo));
            sweep.persist(aligned, "XDPO", *comp, std::nullopt, comp->examples.size());
            cell.steps.push_back(sweep.train(cell.steps.back().model, aligned, dpo.size(), TrainingMethod::DPO, "XDPO",
                                             "XDPO", family, kc, true));
            sweep.finish(cell, cell.steps.back().model);
        } catch (const std::exception& e) {
            cell.status = CellStatus::Failed;
            cell.error = e.what();
        }
        sweep.append(std::move(cell));
    });
    if (auto dir = sweep.run_dir()) record.write_manifest(*dir);
    return record;
}

LabelConsistentSamples collect_label_consistent(Backend& backend, const ModelRef& model_a, const ModelRef& model_b,
                                                const std::vector<LabeledExample>& pool, const LabelSpace& space,
                                                const GenerationOptions& options) {
    const auto set_a = generate_gold_explanations(backend, model_a, pool, space, options);
    const auto set_b = generate_gold_explanations(backend, model_b, pool, space, options);
    LabelConsistentSamples out;
    out.total = pool.size();
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto& pa = set_a.posts[i];
        const auto& pb = set_b.posts[i];
        const auto* ea = pa.find(pa.gold_index);
        const auto* eb = pb.find(pb.gold_index);
        if (!ea || !eb) continue;
        if (ea->parsed.label == pool[i].gold_label && eb->parsed.label == pool[i].gold_label)
            out.samples.push_back({pool[i], *ea, *eb});
    }
    return out;
}

const CellRecord& select_best_cell(std::span<const CellRecord> cells, std::string_view metric, SelectionSplit split) {
    if (metric != "macro_f1" && metric != "accuracy") throw InvalidConfig("unknown metric '" + std::string(metric) + "'");
    const CellRecord* best = nullptr;
    double best_value = 0.0;
    for (const auto& cell : cells) {
        if (!cell.succeeded() || !cell.final_model()) continue;
        const auto& report = split == SelectionSplit::Val ? cell.val : cell.test;
        if (!report) continue;
        const double value = metric == "macro_f1" ? report->macro_f1 : report->accuracy;
        const bool better = !best || value > best_value ||
                            (value == best_value && std::tie(cell.k, cell.model_order) < std::tie(best->k, best->model_order));
        if (better) {
            best = &cell;
            best_value = value;
        }
    }
    if (!best) throw NoSuccessfulCell("no successful cell with a " + std::string(metric) + " score");
    return *best;
}

ModelRef select_best(const RunRecord& record, std::string_view metric, SelectionSplit split) {
    const auto cells = record.cells();
    return *select_best_cell(cells, metric, split).final_model();
}

}  // namespace modalign
