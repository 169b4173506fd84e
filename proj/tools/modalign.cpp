#include <csignal>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "modalign/annotation.hpp"
#include "modalign/backend.hpp"
#include "modalign/corpus.hpp"
#include "modalign/error.hpp"
#include "modalign/evalkit.hpp"
#include "modalign/pipeline.hpp"
#include "modalign/prefdata.hpp"

namespace fs = std::filesystem;
using namespace modalign;

namespace {

struct BackendArgs {
    std::string kind = "mock";
    std::string state_dir;
};

void add_backend_options(CLI::App* cmd, BackendArgs& args) {
    cmd->add_option("--backend", args.kind, "mock or external (external reads MODALIGN_ADAPTER_ROOT/ENDPOINT)")
        ->check(CLI::IsMember({"mock", "external"}));
    cmd->add_option("--state-dir", args.state_dir, "mock backend state directory shared between invocations");
}

std::unique_ptr<Backend> make_backend(const std::string& kind, const std::string& state_dir) {
    if (kind == "external") return std::make_unique<ExternalBackend>(ExternalBackend::from_environment());
    MockBackend::Options options;
    if (!state_dir.empty()) options.state_dir = fs::path(state_dir);
    return std::make_unique<MockBackend>(options);
}

ModelRef load_model(const std::string& path_or_name, Backend& backend) {
    if (fs::exists(path_or_name)) return ModelRef::from_json(json::parse(read_file(path_or_name)));
    return backend.base_model(path_or_name);
}

void write_examples(const fs::path& path, const std::vector<LabeledExample>& examples) {
    write_file_atomic(path, to_jsonl(to_json(examples)));
}

DatasetSplit load_split_dir(const fs::path& dir, const LabelSpace& space) {
    DatasetSplit split;
    split.train = load_dataset(dir / "train.jsonl", space);
    split.val = load_dataset(dir / "val.jsonl", space);
    split.test = load_dataset(dir / "test.jsonl", space);
    return split;
}

void print_cells(const RunRecord& record) {
    for (const auto& cell : record.cells()) {
        std::cout << cell.stage << "  " << cell.model;
        if (cell.partner) std::cout << " <- " << *cell.partner;
        std::cout << "  K=" << cell.k << "  " << cell.variant << "  " << to_string(cell.status);
        if (cell.val) std::cout << "  val_f1=" << cell.val->macro_f1 << " val_acc=" << cell.val->accuracy;
        if (cell.test) std::cout << "  test_f1=" << cell.test->macro_f1;
        if (!cell.succeeded()) std::cout << "  error: " << cell.error;
        std::cout << '\n';
    }
}

fs::path manifest_path(const RunConfig& config, const RunRecord& record) {
    return config.runs_dir.value_or("runs") / record.run_id() / "manifest.json";
}

AnnotationServer* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-augmented preference data and alignment sweeps for explainable moderation"};
    app.require_subcommand(1);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "anonymize and split a labeled corpus");
    std::string task = "hatexplain", input, explanations, out;
    std::uint64_t seed = 0;
    ingest->add_option("--task", task, "built-in task key or task JSON");
    ingest->add_option("--input", input, "JSON-lines posts {id, text, label}")->required();
    ingest->add_option("--explanations", explanations, "JSON-lines {id, explanation}");
    ingest->add_option("--seed", seed, "split seed");
    ingest->add_option("--out", out, "output directory")->required();

    // sample
    auto* sample = app.add_subcommand("sample", "draw a K-shot pool or evaluation subset");
    std::string split_dir, tag = "train";
    int k = 16;
    bool complementary = false, lenient = false;
    sample->add_option("--task", task);
    sample->add_option("--split-dir", split_dir, "directory written by ingest")->required();
    sample->add_option("--k", k, "examples per class")->required();
    sample->add_option("--seed", seed);
    sample->add_option("--split", tag, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    sample->add_flag("--complementary", complementary, "the next K per class after the first K (train only)");
    sample->add_flag("--lenient", lenient, "take what exists for short classes");
    sample->add_option("--out", out)->required();

    // augment
    auto* augment = app.add_subcommand("augment", "generate conditioned explanations and build training data");
    std::string pool_path, model_path, method = "dpo", strategy;
    int k_prime = 0;
    bool gold_only = false;
    BackendArgs backend_args;
    augment->add_option("--task", task);
    augment->add_option("--pool", pool_path, "JSON-lines shot pool")->required();
    augment->add_option("--model", model_path, "ModelRef JSON file or base model name")->required();
    augment->add_option("--method", method, "dpo or kto")->check(CLI::IsMember({"dpo", "kto"}));
    augment->add_option("--subsample", strategy, "K or N")->check(CLI::IsMember({"K", "N"}));
    augment->add_option("--k-prime", k_prime, "sub-sampling K'");
    augment->add_flag("--gold-only", gold_only, "gold-conditioned completions as SFT records");
    augment->add_option("--seed", seed, "generation and sub-sampling seed");
    augment->add_option("--out", out, "training JSON-lines")->required();
    add_backend_options(augment, backend_args);

    // train
    auto* train = app.add_subcommand("train", "run one training job");
    std::string data_path, stage;
    int epochs = 0;
    double lr = 0.0, beta = 0.0;
    train->add_option("--model", model_path, "ModelRef JSON file or base model name")->required();
    train->add_option("--data", data_path, "training JSON-lines")->required();
    train->add_option("--method", method, "sft, dpo or kto")->check(CLI::IsMember({"sft", "dpo", "kto"}))->required();
    train->add_option("--stage", stage, "lineage stage name (defaults to the method)");
    train->add_option("--epochs", epochs);
    train->add_option("--lr", lr);
    train->add_option("--beta", beta);
    train->add_option("--out", out, "ModelRef JSON output")->required();
    add_backend_options(train, backend_args);

    // stage1 / stage2
    std::string config_path, stage1_manifest;
    auto* stage1 = app.add_subcommand("stage1", "self-augmentation sweep over the K schedule");
    stage1->add_option("--config", config_path, "run config JSON")->required();
    auto* stage2 = app.add_subcommand("stage2", "cross-model refinement at k_check");
    stage2->add_option("--config", config_path, "run config JSON")->required();
    stage2->add_option("--stage1", stage1_manifest, "stage-1 manifest (defaults to the one under runs_dir)");

    // eval
    auto* eval = app.add_subcommand("eval", "classify a split and report macro-F1");
    int k_per_class = 0;
    eval->add_option("--task", task);
    eval->add_option("--model", model_path)->required();
    eval->add_option("--data", data_path, "JSON-lines examples")->required();
    eval->add_option("--k-per-class", k_per_class, "evaluate on a seeded per-class subset");
    eval->add_option("--seed", seed);
    eval->add_option("--out", out, "report JSON");
    add_backend_options(eval, backend_args);

    // collect
    auto* collect = app.add_subcommand("collect", "label-consistent explanation pairs for annotation");
    std::string model_b_path;
    collect->add_option("--task", task);
    collect->add_option("--pool", pool_path)->required();
    collect->add_option("--model-a", model_path)->required();
    collect->add_option("--model-b", model_b_path)->required();
    collect->add_option("--out", out, "annotation samples JSON-lines")->required();
    add_backend_options(collect, backend_args);

    // annotate-serve
    auto* serve = app.add_subcommand("annotate-serve", "run the annotation HTTP service");
    std::string host = "127.0.0.1", samples_path;
    int port = 8080, assignments = 3;
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--samples", samples_path, "create a batch from annotation samples JSON-lines");
    serve->add_option("--assignments", assignments, "annotators per item");

    // report
    auto* report = app.add_subcommand("report", "JSON report and charts from run manifests and votes");
    std::vector<std::string> manifests;
    std::string votes_path;
    double full_f1 = 0.0;
    std::size_t train_size = 0;
    report->add_option("--manifest", manifests, "run manifest(s)");
    report->add_option("--votes", votes_path, "exported votes JSON-lines");
    report->add_option("--task", task);
    report->add_option("--full-f1", full_f1, "full-data model macro-F1 for comparison rows");
    report->add_option("--train-size", train_size, "training split size for comparison rows");
    report->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            const auto profile = resolve_task(task);
            auto examples = load_dataset(input, profile.space);
            std::size_t attached = 0;
            if (!explanations.empty()) attached = attach_explanations(examples, explanations);
            const auto split = split_dataset(examples, profile.space, profile.ratios, seed);
            fs::create_directories(out);
            write_examples(fs::path(out) / "train.jsonl", split.train);
            write_examples(fs::path(out) / "val.jsonl", split.val);
            write_examples(fs::path(out) / "test.jsonl", split.test);
            const json summary = {{"task", profile.space.task_name()},
                                  {"seed", seed},
                                  {"posts", examples.size()},
                                  {"explanations", attached},
                                  {"train", split.train.size()},
                                  {"val", split.val.size()},
                                  {"test", split.test.size()}};
            write_file_atomic(fs::path(out) / "split.json", summary.dump(2));
            std::cout << summary.dump() << '\n';
        } else if (*sample) {
            const auto profile = resolve_task(task);
            const auto split = load_split_dir(split_dir, profile.space);
            const auto mode = lenient ? SamplingMode::Lenient : SamplingMode::Strict;
            std::vector<LabeledExample> chosen;
            if (tag == "train") {
                chosen = complementary ? sample_complementary(split, profile.space, k, seed, mode).examples
                                       : sample_k_shot(split, profile.space, k, seed, mode).examples;
            } else {
                chosen = sample_eval_subset(split, tag == "val" ? SplitTag::Val : SplitTag::Test, profile.space, k,
                                            seed, mode);
            }
            write_examples(out, chosen);
            std::cout << chosen.size() << " examples\n";
        } else if (*augment) {
            const auto profile = resolve_task(task);
            auto backend = make_backend(backend_args.kind, backend_args.state_dir);
            const auto model = load_model(model_path, *backend);
            ShotPool pool;
            pool.examples = load_dataset(pool_path, profile.space);
            pool.seed = seed;
            GenerationOptions gen;
            gen.seed = seed;
            TrainingData data;
            std::string variant;
            if (gold_only) {
                const auto cset = generate_gold_explanations(*backend, model, pool.examples, profile.space, gen);
                std::vector<SftRecord> records;
                for (const auto& post : cset.posts) records.push_back({post.prompt, chosen_completion(post)});
                data = serialize(std::span<const SftRecord>(records));
                variant = "XSFT";
            } else {
                const auto cset = generate_conditioned_explanations(*backend, model, pool.examples, profile.space, gen);
                if (!strategy.empty()) {
                    if (method != "dpo" || k_prime < 1) throw InvalidConfig("--subsample needs --method dpo and --k-prime");
                    const auto pairs = strategy == "K" ? subsample_dpo_k(pool, k_prime, seed, cset)
                                                       : subsample_dpo_n(pool, k_prime, seed, cset);
                    data = serialize(std::span<const PreferencePair>(pairs));
                    variant = "DPO-" + strategy + std::to_string(k_prime);
                } else if (method == "dpo") {
                    const auto pairs = build_dpo_pairs(cset);
                    data = serialize(std::span<const PreferencePair>(pairs));
                    variant = "DPO";
                } else {
                    const auto records = build_kto_records(cset);
                    data = serialize(std::span<const ListwiseRecord>(records));
                    variant = "KTO";
                }
            }
            write_file_atomic(out, data.jsonl);
            const auto manifest = dataset_manifest(data, variant, pool,
                                                   strategy.empty() ? std::nullopt : std::optional<int>(k_prime),
                                                   pool.examples.size());
            write_file_atomic(out + ".manifest.json", manifest.dump(2));
            std::cout << variant << " " << data.digest() << '\n';
        } else if (*train) {
            auto backend = make_backend(backend_args.kind, backend_args.state_dir);
            const auto model = load_model(model_path, *backend);
            const auto m = parse_training_method(method);
            auto spec = TrainingSpec::defaults(m);
            if (epochs > 0) spec.epochs = epochs;
            if (lr > 0.0) spec.learning_rate = lr;
            if (beta > 0.0) spec.beta = beta;
            const TrainingData data{m, read_file(data_path)};
            const auto trained = backend->train(model, data, spec, stage.empty() ? to_string(m) : stage);
            write_file_atomic(out, trained.to_json().dump(2));
            std::cout << trained.digest() << '\n';
        } else if (*stage1) {
            const auto config = RunConfig::load(config_path);
            const auto inputs = load_inputs(config);
            auto backend = make_backend(config.backend, config.backend_state_dir ? config.backend_state_dir->string() : "");
            const auto record = run_stage1(config, inputs, *backend);
            if (!config.runs_dir) record.write_manifest(manifest_path(config, record).parent_path());
            print_cells(record);
            std::cout << "manifest: " << manifest_path(config, record).string() << '\n';
            return record.failed_count() == 0 ? 0 : 1;
        } else if (*stage2) {
            const auto config = RunConfig::load(config_path);
            const auto inputs = load_inputs(config);
            auto backend = make_backend(config.backend, config.backend_state_dir ? config.backend_state_dir->string() : "");
            const fs::path s1 = stage1_manifest.empty()
                                    ? config.runs_dir.value_or("runs") / ("stage1-" + config.digest()) / "manifest.json"
                                    : fs::path(stage1_manifest);
            if (!fs::exists(s1)) throw MissingCheckpoint("no stage-1 manifest at " + s1.string());
            const auto first = RunRecord::from_json(json::parse(read_file(s1)));
            const auto record = run_stage2(config, inputs, *backend, first);
            if (!config.runs_dir) record.write_manifest(manifest_path(config, record).parent_path());
            print_cells(record);
            std::cout << "manifest: " << manifest_path(config, record).string() << '\n';
            return record.failed_count() == 0 ? 0 : 1;
        } else if (*eval) {
            const auto profile = resolve_task(task);
            auto backend = make_backend(backend_args.kind, backend_args.state_dir);
            const auto model = load_model(model_path, *backend);
            auto examples = load_dataset(data_path, profile.space);
            if (k_per_class > 0) {
                DatasetSplit split;
                split.test = std::move(examples);
                examples = sample_eval_subset(split, SplitTag::Test, profile.space, k_per_class, seed,
                                              SamplingMode::Lenient);
            }
            const auto result = evaluate_model(*backend, model, examples, profile.space);
            if (!out.empty()) write_file_atomic(out, result.to_json().dump(2));
            std::cout << result.to_json().dump(2) << '\n';
        } else if (*collect) {
            const auto profile = resolve_task(task);
            auto backend = make_backend(backend_args.kind, backend_args.state_dir);
            const auto a = load_model(model_path, *backend);
            const auto b = load_model(model_b_path, *backend);
            const auto pool = load_dataset(pool_path, profile.space);
            const auto consistent = collect_label_consistent(*backend, a, b, pool, profile.space);
            std::vector<json> rows;
            for (const auto& s : annotation_samples(consistent, a.name, b.name)) rows.push_back(s.to_json());
            write_file_atomic(out, to_jsonl(rows));
            std::cout << consistent.retained() << "/" << consistent.total << " label-consistent\n";
        } else if (*serve) {
            AnnotationService service(AnnotationService::options_from_environment());
            if (!samples_path.empty()) {
                std::vector<AnnotationSample> samples;
                for (const auto& row : read_jsonl(samples_path, [&](std::size_t line, const std::string& msg) {
                         throw MalformedRecord(samples_path + ":" + std::to_string(line) + ": " + msg);
                     }))
                    samples.push_back(AnnotationSample::from_json(row));
                std::cout << "batch " << service.create_batch(std::move(samples), assignments) << '\n';
            }
            AnnotationServer server(service);
            if (!server.bind(host, port)) throw IoFailure("cannot bind " + host + ":" + std::to_string(port));
            g_server = &server;
            std::signal(SIGINT, [](int) {
                if (g_server) g_server->stop();
            });
            std::signal(SIGTERM, [](int) {
                if (g_server) g_server->stop();
            });
            std::cout << "listening on " << host << ":" << port << std::endl;
            server.listen_after_bind();
            service.snapshot();
        } else if (*report) {
            std::vector<EvalReport> reports;
            std::vector<ComparisonRow> rows;
            std::vector<VoteTally> tallies;
            for (const auto& path : manifests) {
                const auto record = RunRecord::from_json(json::parse(read_file(path)));
                for (const auto& cell : record.cells()) {
                    if (!cell.succeeded()) continue;
                    const auto& r = cell.test ? cell.test : cell.val;
                    if (!r) continue;
                    reports.push_back(*r);
                    reports.back().series = cell.partner ? cell.model + "<-" + *cell.partner : cell.model + " " + cell.variant;
                    if (full_f1 > 0.0 && train_size > 0) {
                        const auto profile = resolve_task(r->task);
                        rows.push_back(compare_to_full(r->task, cell.model, r->macro_f1, full_f1, cell.k, profile.space,
                                                       train_size));
                    }
                }
            }
            if (!votes_path.empty()) {
                const auto profile = resolve_task(task);
                std::vector<Vote> votes;
                std::map<std::string, std::string> gold;
                for (const auto& row : read_jsonl(votes_path, [&](std::size_t line, const std::string& msg) {
                         throw MalformedRecord(votes_path + ":" + std::to_string(line) + ": " + msg);
                     })) {
                    votes.push_back({row.at("sample_id").get<std::string>(), row.at("annotator_id").get<std::string>(),
                                     row.at("resolved_model").get<std::string>()});
                    gold[votes.back().sample_id] = row.at("gold_label").get<std::string>();
                }
                tallies.push_back(aggregate_votes(votes, gold, profile.space));
                write_file_atomic(fs::path(out) / "votes.csv", tallies.back().to_csv());
            }
            for (const auto& path : emit_report(reports, rows, tallies, out)) std::cout << path.string() << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
