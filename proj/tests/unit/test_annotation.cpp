#include <doctest.h>

#include <atomic>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include <httplib.h>

#include "fixtures.hpp"
#include "modalign/annotation.hpp"
#include "modalign/error.hpp"

using namespace modalign;
using namespace modalign::testing;

namespace {

std::vector<AnnotationSample> make_samples(std::size_t n) {
    const char* labels[3] = {"Normal", "Offensive", "Hate"};
    std::vector<AnnotationSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto id = "s" + std::to_string(1000 + i);
        out.push_back({id, "post " + id, labels[i % 3], "flan-t5-large", "explanation A of " + id, "llama-3-8b",
                       "explanation B of " + id});
    }
    return out;
}

AnnotationService::Options fixed_clock(std::uint64_t seed = 1) {
    AnnotationService::Options options;
    options.seed = seed;
    auto tick = std::make_shared<std::atomic<int>>(0);
    options.clock = [tick] {
        char buf[40];
        std::snprintf(buf, sizeof buf, "2025-01-01T00:00:%02d.%03dZ", (*tick / 1000) % 60, (*tick)++ % 1000);
        return std::string(buf);
    };
    return options;
}

std::string expected_model(const AnnotationItem& item, Choice choice) {
    const bool first = choice == Choice::First;
    return first != item.order_flip ? "flan-t5-large" : "llama-3-8b";
}

void check_no_provenance(const json& payload) {
    const auto text = payload.dump();
    CHECK(text.find("flan-t5-large") == std::string::npos);
    CHECK(text.find("llama-3-8b") == std::string::npos);
    CHECK_FALSE(payload.contains("order_flip"));
    CHECK_FALSE(payload.contains("model_a"));
    CHECK_FALSE(payload.contains("resolved_model"));
}

}  // namespace

TEST_SUITE("annotation") {

TEST_CASE("samples come from label-consistent pairs") {
    LabelConsistentSamples collected;
    collected.total = 2;
    PairedExplanation pair;
    pair.example = make_example("p1", "Hate");
    pair.a.parsed.explanation = "ea";
    pair.b.parsed.explanation = "eb";
    collected.samples.push_back(pair);
    const auto samples = annotation_samples(collected, "A", "B");
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].sample_id == "p1");
    CHECK(samples[0].gold_label == "Hate");
    CHECK(samples[0].explanation_a == "ea");
    CHECK(samples[0].model_b == "B");
    CHECK(AnnotationSample::from_json(samples[0].to_json()).explanation_b == "eb");
}

TEST_CASE("choices parse from words and digits") {
    CHECK(parse_choice("first") == Choice::First);
    CHECK(parse_choice("2") == Choice::Second);
    CHECK(parse_choice("SECOND") == Choice::Second);
    CHECK_THROWS_AS(parse_choice("third"), std::invalid_argument);
}

TEST_CASE("batches validate their samples") {
    AnnotationService service(fixed_clock());
    CHECK_THROWS_AS(service.create_batch({}), EmptyBatch);
    CHECK_THROWS_AS(service.create_batch(make_samples(2), 0), InvalidConfig);
    auto dup = make_samples(2);
    dup[1].sample_id = dup[0].sample_id;
    CHECK_THROWS_AS(service.create_batch(dup), InvalidConfig);
    CHECK(service.create_batch(make_samples(2)) == "batch-0001");
    CHECK(service.create_batch(make_samples(2)) == "batch-0002");
    CHECK(service.batch_ids().size() == 2);
    CHECK_THROWS_AS(service.status("batch-9999"), UnknownBatch);
}

TEST_CASE("every item is judged by the requested number of distinct annotators") {
    AnnotationService service(fixed_clock());
    const auto batch = service.create_batch(make_samples(342), 3);
    std::map<std::string, std::set<std::string>> judges;
    std::size_t annotators = 0;
    while (!service.status(batch).complete()) {
        const auto ann = service.register_annotator({});
        ++annotators;
        for (int served = 0; served < 80; ++served) {
            const auto result = service.serve_next(ann);
            if (result.done()) break;
            CHECK(judges[result.item->sample_id].insert(ann).second);
            service.submit_vote(ann, result.item->sample_id, served % 2 ? Choice::First : Choice::Second);
        }
        REQUIRE(annotators < 40);
    }
    CHECK(judges.size() == 342);
    for (const auto& [id, who] : judges) CHECK(who.size() == 3);
    CHECK(service.votes(batch).size() == 1026);
    const auto status = service.status(batch);
    CHECK(status.votes == 1026);
    CHECK(status.claimed == 1026);
}

TEST_CASE("an annotator is served at most one item per slot") {
    AnnotationService service(fixed_clock());
    service.create_batch(make_samples(1), 1);
    const auto first = service.register_annotator({"ann-1", {}});
    const auto second = service.register_annotator({"ann-2", {}});
    const auto item = service.serve_next(first);
    REQUIRE_FALSE(item.done());
    CHECK(service.serve_next(second).done());

    const auto again = service.serve_next(first);
    CHECK(again.item->sample_id == item.item->sample_id);
    CHECK(again.item->order_flip == item.item->order_flip);
    service.submit_vote(first, item.item->sample_id, Choice::First);
    const auto done = service.serve_next(first);
    CHECK(done.done());
    CHECK(done.answered == 1);
    CHECK(done.client_json().at("status") == "DONE");
}

TEST_CASE("a fresh annotator with two assignments gets two items then DONE") {
    AnnotationService service(fixed_clock());
    service.create_batch(make_samples(2), 1);
    const auto ann = service.register_annotator({});
    CHECK(ann.rfind("ann-", 0) == 0);
    for (int i = 0; i < 2; ++i) {
        const auto r = service.serve_next(ann);
        REQUIRE_FALSE(r.done());
        service.submit_vote(ann, r.item->sample_id, Choice::Second);
    }
    CHECK(service.serve_next(ann).done());
}

TEST_CASE("per-annotator quota") {
    auto options = fixed_clock();
    options.max_items_per_annotator = 2;
    AnnotationService service(options);
    service.create_batch(make_samples(5), 1);
    const auto ann = service.register_annotator({});
    for (int i = 0; i < 2; ++i) {
        const auto r = service.serve_next(ann);
        REQUIRE_FALSE(r.done());
        service.submit_vote(ann, r.item->sample_id, Choice::First);
    }
    CHECK(service.serve_next(ann).done());
}

TEST_CASE("order flips are balanced and deterministic") {
    std::size_t flips = 0;
    for (int i = 0; i < 1000; ++i) {
        flips += AnnotationService::order_flip(3, "sample-" + std::to_string(i), "ann-x") ? 1 : 0;
    }
    CHECK(flips >= 450);
    CHECK(flips <= 550);
    CHECK(AnnotationService::order_flip(3, "a", "b") == AnnotationService::order_flip(3, "a", "b"));
    std::size_t by_annotator = 0;
    for (int i = 0; i < 1000; ++i) by_annotator += AnnotationService::order_flip(5, "s", "ann-" + std::to_string(i)) ? 1 : 0;
    CHECK(by_annotator >= 450);
    CHECK(by_annotator <= 550);
}

TEST_CASE("votes resolve to the displayed model under both orders") {
    AnnotationService service(fixed_clock(11));
    const auto samples = make_samples(60);
    const auto batch = service.create_batch(samples, 1);
    const auto ann = service.register_annotator({});
    std::set<bool> seen_flips;
    for (int i = 0; i < 60; ++i) {
        const auto r = service.serve_next(ann);
        REQUIRE_FALSE(r.done());
        const auto& item = *r.item;
        seen_flips.insert(item.order_flip);
        const auto& sample = samples.at(static_cast<std::size_t>(std::stoi(item.sample_id.substr(1)) - 1000));
        CHECK(item.explanation_first == (item.order_flip ? sample.explanation_b : sample.explanation_a));
        CHECK(item.criteria == kAnnotationCriteria);
        const auto choice = i % 2 ? Choice::First : Choice::Second;
        const auto vote = service.submit_vote(ann, item.sample_id, choice);
        CHECK(vote.resolved_model == expected_model(item, choice));
        CHECK(vote.gold_label == sample.gold_label);
    }
    CHECK(seen_flips.size() == 2);
    CHECK(service.votes(batch).size() == 60);
}

TEST_CASE("vote errors") {
    AnnotationService service(fixed_clock());
    service.create_batch(make_samples(3), 1);
    const auto ann = service.register_annotator({});
    const auto other = service.register_annotator({});
    const auto r = service.serve_next(ann);
    CHECK_THROWS_AS(service.submit_vote("ghost", r.item->sample_id, Choice::First), UnknownAnnotator);
    CHECK_THROWS_AS(service.serve_next("ghost"), UnknownAnnotator);
    CHECK_THROWS_AS(service.submit_vote(other, r.item->sample_id, Choice::First), NotAssigned);
    service.submit_vote(ann, r.item->sample_id, Choice::First);
    CHECK_THROWS_AS(service.submit_vote(ann, r.item->sample_id, Choice::Second), DuplicateVote);
}

TEST_CASE("concurrent votes on one item are all kept") {
    AnnotationService service(fixed_clock());
    const auto batch = service.create_batch(make_samples(1), 8);
    std::vector<std::string> annotators;
    for (int i = 0; i < 8; ++i) annotators.push_back(service.register_annotator({}));
    std::vector<std::thread> threads;
    std::atomic<int> failures{0};
    for (const auto& ann : annotators) {
        threads.emplace_back([&, ann] {
            try {
                const auto r = service.serve_next(ann);
                service.submit_vote(ann, r.item->sample_id, Choice::First);
            } catch (...) {
                ++failures;
            }
        });
    }
    for (auto& t : threads) t.join();
    CHECK(failures == 0);
    CHECK(service.votes(batch).size() == 8);
}

TEST_CASE("exports are sorted, stable and feed aggregation") {
    AnnotationService service(fixed_clock(4));
    const auto batch = service.create_batch(make_samples(30), 3);
    for (int a = 0; a < 3; ++a) {
        const auto ann = service.register_annotator({});
        for (;;) {
            const auto r = service.serve_next(ann);
            if (r.done()) break;
            service.submit_vote(ann, r.item->sample_id, (a + r.answered) % 3 ? Choice::First : Choice::Second);
        }
    }
    const auto jsonl = service.export_votes(batch);
    CHECK(jsonl == service.export_votes(batch));
    std::vector<Vote> votes;
    std::string previous;
    std::size_t start = 0;
    while (start < jsonl.size()) {
        const auto end = jsonl.find('\n', start);
        const auto line = jsonl.substr(start, end - start);
        const auto row = json::parse(line);
        start = end + 1;
        CHECK(line.rfind("{\"sample_id\":", 0) == 0);
        CHECK(row.at("sample_id").get<std::string>() >= previous);
        previous = row.at("sample_id").get<std::string>();
        votes.push_back({row.at("sample_id"), row.at("annotator_id"), row.at("resolved_model")});
    }
    CHECK(votes.size() == 90);
    const auto space = builtin_task("hatexplain").space;
    const auto tally = aggregate_votes(votes, service.gold_labels(batch), space);
    CHECK(tally.voted_samples == 30);
    CHECK(tally.winners.size() + tally.tie_count == 30);

    const auto csv = service.export_votes(batch, ExportFormat::Csv);
    CHECK(csv.rfind("sample_id,annotator_id,resolved_model,gold_label,timestamp\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 91);
    CHECK_THROWS_AS(service.export_votes("nope"), UnknownBatch);
}

TEST_CASE("client payloads hide provenance") {
    AnnotationService service(fixed_clock());
    service.create_batch(make_samples(4), 1);
    const auto ann = service.register_annotator({});
    const auto r = service.serve_next(ann);
    const auto payload = r.client_json();
    check_no_provenance(payload);
    CHECK(payload.at("criteria") == kAnnotationCriteria);
    CHECK(payload.at("label") == r.item->gold_label);
    CHECK(payload.contains("explanation_1"));
    CHECK(payload.at("progress").at("assigned") == r.assigned);
}

TEST_CASE("demographics are summarized apart from votes") {
    AnnotationService service(fixed_clock());
    service.register_annotator({"a1", {{"country", "US"}, {"age", "25-34"}}});
    service.register_annotator({"a2", {{"country", "US"}}});
    const auto summary = service.demographics_summary();
    CHECK(summary.at("demographics").at("country").at("US") == 2);
    CHECK(summary.at("demographics").at("age").at("25-34") == 1);
    CHECK(summary.at("annotators") == 2);
}

TEST_CASE("service state survives a restart") {
    const auto dir = scratch_dir("annotation-persist");
    auto options = fixed_clock(9);
    options.data_dir = dir;
    options.snapshot_every = 5;
    std::string batch;
    std::string ann;
    std::string pending;
    std::string exported;
    {
        AnnotationService service(options);
        batch = service.create_batch(make_samples(10), 2);
        ann = service.register_annotator({"ann-a", {{"country", "CA"}}});
        for (int i = 0; i < 3; ++i) {
            const auto r = service.serve_next(ann);
            service.submit_vote(ann, r.item->sample_id, Choice::First);
        }
        pending = service.serve_next(ann).item->sample_id;
        exported = service.export_votes(batch);
    }
    CHECK(std::filesystem::exists(dir / "snapshot.json"));
    {
        AnnotationService service(options);
        CHECK(service.export_votes(batch) == exported);
        CHECK(service.serve_next(ann).item->sample_id == pending);
        CHECK(service.register_annotator({"ann-a", {{"country", "CA"}}}) == "ann-a");
        service.submit_vote(ann, pending, Choice::Second);
        exported = service.export_votes(batch);
    }
    {
        std::ofstream log(dir / "log.jsonl", std::ios::app);
        log << "{\"type\":\"vote\",\"seq\":99999,\"vo";
    }
    AnnotationService service(options);
    CHECK(service.export_votes(batch) == exported);
    CHECK(service.votes(batch).size() == 4);
    CHECK(service.demographics_summary().at("demographics").at("country").at("CA") == 1);
    const auto r = service.serve_next(ann);
    REQUIRE_FALSE(r.done());
    CHECK_NOTHROW(service.submit_vote(ann, r.item->sample_id, Choice::First));
}

TEST_CASE("http api round trip") {
    AnnotationService service(fixed_clock(21));
    const auto batch = service.create_batch(make_samples(6), 1);
    AnnotationServer server(service);
    const int port = server.bind_any_port();
    REQUIRE(port > 0);
    std::thread listener([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    auto reg = client.Post("/annotators", R"({"demographics": {"country": "UK"}})", "application/json");
    REQUIRE(reg);
    CHECK(reg->status == 201);
    CHECK(reg->get_header_value("Access-Control-Allow-Origin") == "*");
    const auto ann = json::parse(reg->body).at("annotator_id").get<std::string>();

    std::map<std::string, std::string> expected;
    for (int i = 0;; ++i) {
        auto next = client.Get(("/next?annotator=" + ann).c_str());
        REQUIRE(next);
        CHECK(next->status == 200);
        const auto payload = json::parse(next->body);
        check_no_provenance(payload);
        if (payload.at("status") == "DONE") break;
        CHECK(payload.at("criteria") == kAnnotationCriteria);
        const auto sample = payload.at("sample_id").get<std::string>();
        const auto choice = i % 2 ? "FIRST" : "SECOND";
        const bool flip = AnnotationService::order_flip(21, sample, ann);
        expected[sample] = (std::string(choice) == "FIRST") != flip ? "flan-t5-large" : "llama-3-8b";
        auto vote = client.Post("/votes", json{{"annotator_id", ann}, {"sample_id", sample}, {"choice", choice}}.dump(),
                                "application/json");
        REQUIRE(vote);
        CHECK(vote->status == 201);
        check_no_provenance(json::parse(vote->body));
        auto dup = client.Post("/votes", json{{"annotator_id", ann}, {"sample_id", sample}, {"choice", choice}}.dump(),
                               "application/json");
        CHECK(dup->status == 409);
    }
    CHECK(expected.size() == 6);

    auto exported = client.Get(("/export?batch=" + batch).c_str());
    REQUIRE(exported);
    CHECK(exported->status == 200);
    std::size_t rows = 0;
    std::size_t start = 0;
    while (start < exported->body.size()) {
        const auto end = exported->body.find('\n', start);
        const auto row = json::parse(exported->body.substr(start, end - start));
        start = end + 1;
        CHECK(row.at("resolved_model") == expected.at(row.at("sample_id")));
        ++rows;
    }
    CHECK(rows == 6);
    auto csv = client.Get(("/export?batch=" + batch + "&format=csv").c_str());
    CHECK(csv->body == service.export_votes(batch, ExportFormat::Csv));

    CHECK(client.Get("/next?annotator=ghost")->status == 404);
    CHECK(client.Get("/next")->status == 400);
    CHECK(client.Get("/export?batch=nope")->status == 404);
    CHECK(client.Post("/votes", "{not json", "application/json")->status == 400);
    CHECK(client.Post("/votes", json{{"annotator_id", ann}, {"sample_id", "s1000"}, {"choice", "maybe"}}.dump(),
                      "application/json")
              ->status == 400);
    const auto other = service.register_annotator({});
    CHECK(client.Post("/votes", json{{"annotator_id", other}, {"sample_id", "s1000"}, {"choice", "1"}}.dump(),
                      "application/json")
              ->status == 403);
    auto preflight = client.Options("/votes");
    REQUIRE(preflight);
    CHECK(preflight->status == 204);

    server.stop();
    listener.join();
}

}
