#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "esckit/backend.hpp"
#include "esckit/engine.hpp"
#include "esckit/taxonomy.hpp"

namespace esckit {

struct SessionConfig {
    /// Taxonomy profile name; empty selects the service default.
    std::string taxonomy;
    Ablation ablation;

    bool operator==(const SessionConfig&) const = default;
};

struct MessageEnvelope {
    std::string reply;
    std::optional<std::string> strategy_id;
    StepDebug debug;
    std::size_t turn_index = 0;
};

struct SessionView {
    std::string session_id;
    std::string created_at;
    SessionConfig config;
    SessionState state;
    /// One JSON debug record per completed turn.
    std::vector<std::string> debug_history;
};

struct ServiceOptions {
    /// Available profiles; the first is the default.
    std::vector<LabelSet> taxonomies;
    BackendBindings bindings;
    EngineConfig engine;
    PromptLibrary prompts = PromptLibrary::builtin();
    /// Append-only event log; empty keeps sessions in memory only.
    std::filesystem::path store;
};

/// Owns live sessions. Posts to one session are serialized; different
/// sessions proceed independently.
class ChatService {
public:
    /// Replays the event store when one is configured.
    explicit ChatService(ServiceOptions options);
    ~ChatService();

    ChatService(const ChatService&) = delete;
    ChatService& operator=(const ChatService&) = delete;

    /// BadConfig(field) for an unknown taxonomy profile.
    std::string create_session(const SessionConfig& config = {});
    /// NotFound, EmptyMessage, UpstreamBackendError. On upstream failure the
    /// user turn stays in the transcript and no system turn is added.
    MessageEnvelope post_message(const std::string& session_id, const std::string& text);
    /// NotFound.
    SessionView get_session(const std::string& session_id) const;
    std::vector<std::string> session_ids() const;

    const LabelSet& taxonomy(const std::string& profile = {}) const;
    std::vector<std::string> profiles() const;
    const BackendBindings& bindings() const { return options_.bindings; }

private:
    struct Session;
    struct Store;

    std::shared_ptr<Session> find(const std::string& session_id) const;
    const Engine& engine_for(const std::string& profile) const;
    std::string new_session_id();
    void replay();

    ServiceOptions options_;
    std::map<std::string, std::unique_ptr<Engine>> engines_;
    mutable std::shared_mutex sessions_mu_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::unique_ptr<Store> store_;
    std::mutex id_mu_;
    std::uint64_t id_state_;
};

// --- JSON views shared by the HTTP layer and the CLI. ----------------------------------------

std::string envelope_json(const MessageEnvelope& envelope, const LabelSet& taxonomy);
std::string session_json(const SessionView& view, const LabelSet& taxonomy);
/// Label universe for UI display: ids, names and flags, never prompts or
/// backend details.
std::string taxonomy_json(const LabelSet& taxonomy, const std::vector<std::string>& profiles);
std::string error_json(const std::string& code, const std::string& message);
/// Debug record of one step (profile, summary, strategy, fallback_used).
std::string debug_json(const StepDebug& debug);

/// Maps an error to an HTTP status and a client-safe message.
int http_status_for(ErrorCode code);
std::string client_message(const Error& error);

// --- HTTP server ---------------------------------------------------------------------------

struct ServerOptions {
    std::string host = "127.0.0.1";
    /// 0 picks a free port.
    int port = 8080;
    /// Serves the browser client from this directory when set.
    std::filesystem::path static_dir;
    bool cors = true;
};

/// Routes:
///   POST /api/sessions                  {"taxonomy"?, "ablation"?: [..]}
///   POST /api/sessions/{id}/messages    {"text": ".."}
///   GET  /api/sessions/{id}
///   GET  /api/meta/taxonomy[?profile=..]
///   GET  /api/health
class HttpServer {
public:
    HttpServer(ChatService& service, ServerOptions options);
    ~HttpServer();

    /// Binds and serves on a background thread; returns the bound port.
    int start();
    /// Binds and serves on the calling thread until stop().
    void run();
    void stop();
    int port() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace esckit
