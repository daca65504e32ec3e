#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "esckit/error.hpp"
#include "esckit/service.hpp"

namespace esckit {

namespace {

void send_json(httplib::Response& res, int status, const std::string& body) {
    res.status = status;
    res.set_content(body, "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, const Error& e) {
    send_json(res, http_status_for(e.code()), error_json(std::string(to_string(e.code())), client_message(e)));
}

nlohmann::json parse_body(const httplib::Request& req, bool allow_empty) {
    if (req.body.empty() && allow_empty) return nlohmann::json::object();
    try {
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "request body must be a JSON object");
        return j;
    } catch (const nlohmann::json::parse_error&) {
        throw Error(ErrorCode::InvalidArgument, "request body is not valid JSON");
    }
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        send_error(res, e);
    } catch (const nlohmann::json::exception&) {
        send_json(res, 400, error_json("InvalidArgument", "malformed request fields"));
    } catch (const std::exception&) {
        send_json(res, 500, error_json("Internal", "internal error"));
    }
}

}  // namespace

struct HttpServer::Impl {
    ChatService& service;
    ServerOptions options;
    httplib::Server server;
    std::thread thread;
    std::atomic<int> port{0};

    Impl(ChatService& s, ServerOptions o) : service(s), options(std::move(o)) { routes(); }

    void routes() {
        server.new_task_queue = [] { return new httplib::ThreadPool(32); };
        server.set_keep_alive_timeout(2);
        if (options.cors) {
            server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                        {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                        {"Access-Control-Allow-Headers", "Content-Type"}});
            server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
        }

        server.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, R"({"status":"ok"})");
        });

        server.Get("/api/meta/taxonomy", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto profile = req.has_param("profile") ? req.get_param_value("profile") : std::string{};
                send_json(res, 200, taxonomy_json(service.taxonomy(profile), service.profiles()));
            });
        });

        server.Post("/api/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto body = parse_body(req, true);
                SessionConfig config;
                config.taxonomy = body.value("taxonomy", std::string{});
                if (body.contains("ablation")) {
                    if (!body["ablation"].is_array()) throw Error(ErrorCode::BadConfig, "ablation must be a list");
                    config.ablation = parse_ablation(body["ablation"].get<std::vector<std::string>>());
                }
                const auto id = service.create_session(config);
                const auto view = service.get_session(id);
                send_json(res, 201, session_json(view, service.taxonomy(view.config.taxonomy)));
            });
        });

        server.Post(R"(/api/sessions/([A-Za-z0-9_-]+)/messages)", [this](const httplib::Request& req,
                                                                         httplib::Response& res) {
            guarded(res, [&] {
                const auto body = parse_body(req, false);
                if (!body.contains("text") || !body["text"].is_string())
                    throw Error(ErrorCode::EmptyMessage, "field \"text\" is required");
                const std::string id = req.matches[1];
                const auto envelope = service.post_message(id, body["text"].get<std::string>());
                const auto view_taxonomy = service.get_session(id).config.taxonomy;
                send_json(res, 200, envelope_json(envelope, service.taxonomy(view_taxonomy)));
            });
        });

        server.Get(R"(/api/sessions/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto view = service.get_session(req.matches[1]);
                send_json(res, 200, session_json(view, service.taxonomy(view.config.taxonomy)));
            });
        });

        if (!options.static_dir.empty()) {
            if (!server.set_mount_point("/", options.static_dir.string()))
                throw Error(ErrorCode::MissingFile, options.static_dir.string());
        }
    }

    int bind() {
        if (options.port == 0) {
            port = server.bind_to_any_port(options.host);
        } else {
            port = server.bind_to_port(options.host, options.port) ? options.port : -1;
        }
        if (port <= 0) throw Error(ErrorCode::IoError, "cannot bind " + options.host + ":" + std::to_string(options.port));
        return port;
    }
};

HttpServer::HttpServer(ChatService& service, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start() {
    const int p = impl_->bind();
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return p;
}

void HttpServer::run() {
    impl_->bind();
    impl_->server.listen_after_bind();
}

void HttpServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

int HttpServer::port() const { return impl_->port; }

}  // namespace esckit
