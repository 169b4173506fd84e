#include <httplib.h>

#include "modalign/annotation.hpp"
#include "modalign/error.hpp"

namespace modalign {

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view kind, std::string_view message) {
    send_json(res, status, {{"error", kind}, {"message", message}});
}

// Maps service errors to HTTP statuses; anything unexpected becomes a 500.
template <typename F>
void guarded(httplib::Response& res, F&& body) {
    try {
        body();
    } catch (const UnknownAnnotator& e) {
        send_error(res, 404, "UnknownAnnotator", e.what());
    } catch (const UnknownBatch& e) {
        send_error(res, 404, "UnknownBatch", e.what());
    } catch (const NotAssigned& e) {
        send_error(res, 403, "NotAssigned", e.what());
    } catch (const DuplicateVote& e) {
        send_error(res, 409, "DuplicateVote", e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, "BadRequest", e.what());
    } catch (const std::invalid_argument& e) {
        send_error(res, 400, "BadRequest", e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "InternalError", e.what());
    }
}

json parse_body(const httplib::Request& req) {
    auto body = req.body.empty() ? json::object() : json::parse(req.body);
    if (!body.is_object()) throw std::invalid_argument("request body must be a JSON object");
    return body;
}

}  // namespace

struct AnnotationServer::Impl {
    AnnotationService& service;
    httplib::Server server;
};

AnnotationServer::AnnotationServer(AnnotationService& service) : impl_(new Impl{service, {}}) {
    auto& server = impl_->server;
    auto& svc = impl_->service;
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Allow-Headers", "Content-Type"}});
    server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Post("/annotators", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = parse_body(req);
            AnnotatorProfile profile;
            profile.annotator_id = body.value("annotator_id", std::string{});
            if (body.contains("demographics") && !body.at("demographics").is_null()) {
                for (const auto& [key, value] : body.at("demographics").items()) {
                    if (!value.is_string()) throw std::invalid_argument("demographic values must be strings");
                    profile.demographics[key] = value.get<std::string>();
                }
            }
            send_json(res, 201, {{"annotator_id", svc.register_annotator(std::move(profile))}});
        });
    });

    server.Get("/next", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            if (!req.has_param("annotator")) throw std::invalid_argument("missing annotator parameter");
            send_json(res, 200, svc.serve_next(req.get_param_value("annotator")).client_json());
        });
    });

    server.Post("/votes", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            const auto body = parse_body(req);
            const auto vote = svc.submit_vote(body.at("annotator_id").get<std::string>(),
                                              body.at("sample_id").get<std::string>(),
                                              parse_choice(body.at("choice").get<std::string>()));
            send_json(res, 201, {{"status", "recorded"}, {"sample_id", vote.sample_id}, {"timestamp", vote.timestamp}});
        });
    });

    server.Get("/export", [&svc](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            if (!req.has_param("batch")) throw std::invalid_argument("missing batch parameter");
            const bool csv = req.has_param("format") && req.get_param_value("format") == "csv";
            res.status = 200;
            res.set_content(svc.export_votes(req.get_param_value("batch"), csv ? ExportFormat::Csv : ExportFormat::Jsonl),
                            csv ? "text/csv" : "application/x-ndjson");
        });
    });
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind_any_port(const std::string& host) { return impl_->server.bind_to_any_port(host); }

bool AnnotationServer::bind(const std::string& host, int port) { return impl_->server.bind_to_port(host, port); }

bool AnnotationServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

void AnnotationServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace modalign
