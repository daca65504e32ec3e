#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <semaphore>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "esckit/error.hpp"

namespace esckit {

/// Which LLM role a request is made for. Scripted backends match on it and
/// request logs carry it.
enum class RoleTag {
    generator,
    modifier,
    reviewer,
    judger,
    profiler,
    summarizer,
    planner,
    supporter,
    plausibility_judge,
};

std::string_view to_string(RoleTag role);
std::optional<RoleTag> role_from_string(std::string_view name);
const std::vector<RoleTag>& all_roles();

/// 0.0 for scoring roles, 0.7 for free generation.
double default_temperature(RoleTag role);

enum class MessageRole { system_prompt, user, assistant };

std::string_view to_string(MessageRole role);

struct ChatMessage {
    MessageRole role;
    std::string text;

    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    RoleTag role = RoleTag::generator;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_output_tokens = 1024;
    std::string request_id;

    /// Text of the final message; matchers look here.
    const std::string& last_text() const;
    /// Throws InvalidArgument unless messages is non-empty and starts with
    /// a system prompt.
    void validate() const;
};

/// System prompt + one user message, with the role's default temperature.
ChatRequest make_request(RoleTag role, std::string system_prompt, std::string user_text,
                         std::string request_id);

struct ChatResponse {
    std::string text;
    std::string backend_name;
    std::chrono::milliseconds latency{0};
    bool truncated = false;
};

class Backend {
public:
    virtual ~Backend() = default;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
    virtual std::string name() const = 0;
};

using BackendPtr = std::shared_ptr<Backend>;

// ---------------------------------------------------------------------------
// Structured request log. One JSON object per line, correlated by request_id.
// Only metadata is written; credentials never reach this sink.

class RequestLog {
public:
    explicit RequestLog(std::ostream& out) : out_(&out) {}

    void record(std::string_view request_id, std::string_view backend, RoleTag role, int attempt,
                std::string_view outcome, int status, std::chrono::milliseconds latency);

private:
    std::mutex mu_;
    std::ostream* out_;
};

// ---------------------------------------------------------------------------
// Scripted backend: deterministic test double.

struct ScriptRule {
    /// Matches any role when unset.
    std::optional<RoleTag> role;
    /// Substring required in the last message; empty matches everything.
    std::string contains;
    std::string reply;
    /// Non-repeating rules fire once and are then skipped.
    bool repeat = false;
    /// When set, computes the reply; returning nullopt means "does not fire".
    std::function<std::optional<std::string>(const ChatRequest&)> responder;
    /// When set, firing throws this error instead of replying.
    std::optional<ErrorCode> raise;
};

struct ServedRequest {
    ChatRequest request;
    std::string reply;
};

class ScriptedBackend : public Backend {
public:
    explicit ScriptedBackend(std::vector<ScriptRule> script, std::string name = "scripted");

    ChatResponse complete(const ChatRequest& request) override;
    std::string name() const override { return name_; }

    std::vector<ServedRequest> transcript() const;
    std::size_t served_count() const;
    std::size_t served_count(RoleTag role) const;
    void clear_transcript();

private:
    mutable std::mutex mu_;
    std::vector<ScriptRule> script_;
    std::vector<bool> consumed_;
    std::vector<ServedRequest> transcript_;
    std::string name_;
};

/// InvalidArgument when the script is empty.
std::shared_ptr<ScriptedBackend> scripted_backend(std::vector<ScriptRule> script,
                                                  std::string name = "scripted");

// ---------------------------------------------------------------------------
// HTTP chat-completion backend.

struct BackendConfig {
    std::string name;
    /// Wire family: "openai" (also vLLM / TGI style servers) or "anthropic".
    std::string vendor = "openai";
    /// Base URL including any version prefix, e.g. "http://127.0.0.1:8000/v1".
    std::string endpoint;
    std::string model;
    /// Name of the environment variable holding the secret. Never the secret.
    std::string credential_env;
    std::chrono::milliseconds timeout{60000};
    int max_retries = 2;
    std::chrono::milliseconds backoff_initial{500};
    double backoff_multiplier = 2.0;
    int max_parallel = 4;

    /// BadConfig on non-positive timeout, out-of-range retries, etc.
    void validate() const;
};

/// Reads ESCKIT_<NAME>_ENDPOINT, _MODEL, _VENDOR, _TIMEOUT_MS, _MAX_RETRIES;
/// credential_env becomes ESCKIT_<NAME>_API_KEY.
BackendConfig backend_config_from_env(const std::string& name);

enum class TransportFailure { none, timeout, connection };

struct HttpReply {
    int status = 0;
    std::string body;
    TransportFailure failure = TransportFailure::none;
    std::string error;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpReply post(const std::string& url, const HttpHeaders& headers, const std::string& body,
                           std::chrono::milliseconds timeout) = 0;
};

std::shared_ptr<HttpTransport> make_default_transport();

struct DecodedReply {
    std::string text;
    bool truncated = false;
};

/// Vendor-specific request shaping. One per wire family.
class WireAdapter {
public:
    virtual ~WireAdapter() = default;
    virtual std::string path_suffix() const = 0;
    virtual HttpHeaders headers(const std::string& credential) const = 0;
    virtual std::string encode(const ChatRequest& request, const BackendConfig& cfg) const = 0;
    /// ProtocolError when the body does not have the expected shape.
    virtual DecodedReply decode(const std::string& body) const = 0;
};

std::unique_ptr<WireAdapter> adapter_for_vendor(std::string_view vendor);

class HttpBackend : public Backend {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    HttpBackend(BackendConfig cfg, std::shared_ptr<HttpTransport> transport = make_default_transport(),
                std::shared_ptr<RequestLog> log = nullptr, Sleeper sleeper = {});

    /// At most 1 + max_retries attempts. Retries transport failures, 408,
    /// 429 and 5xx. Raises Timeout, RateLimited, Unavailable, ProtocolError
    /// or AuthError.
    ChatResponse complete(const ChatRequest& request) override;
    std::string name() const override { return cfg_.name; }

    /// Total network attempts made over the backend's lifetime.
    int attempts_made() const { return attempts_.load(); }

private:
    BackendConfig cfg_;
    std::unique_ptr<WireAdapter> adapter_;
    std::shared_ptr<HttpTransport> transport_;
    std::shared_ptr<RequestLog> log_;
    Sleeper sleeper_;
    std::counting_semaphore<> inflight_;
    std::atomic<int> attempts_{0};
};

/// Caps concurrent calls into `inner` across every holder of the gate.
class BoundedBackend : public Backend {
public:
    BoundedBackend(BackendPtr inner, std::shared_ptr<std::counting_semaphore<>> gate);

    ChatResponse complete(const ChatRequest& request) override;
    std::string name() const override { return inner_->name(); }

private:
    BackendPtr inner_;
    std::shared_ptr<std::counting_semaphore<>> gate_;
};

// ---------------------------------------------------------------------------
// Role bindings, loaded from a JSON document:
//
//   {"backends": {"<name>": {"type": "http", ...BackendConfig fields...}
//                 "<name>": {"type": "scripted", "script": [{"role", "contains",
//                                                           "reply", "repeat"}]}},
//    "roles": {"planner": "<name>", ...},
//    "plausibility_judges": ["<name>", ...]}

struct BackendBindings {
    std::map<std::string, BackendPtr> backends;
    std::map<RoleTag, BackendPtr> roles;
    std::vector<BackendPtr> plausibility_judges;

    /// BadConfig when the role is unbound.
    BackendPtr for_role(RoleTag role) const;
    /// Names of backends bound per role; safe to expose (no endpoints).
    std::map<std::string, std::string> describe() const;
};

BackendBindings parse_bindings(std::string_view document, std::shared_ptr<RequestLog> log = nullptr);
BackendBindings load_bindings(const std::filesystem::path& path, std::shared_ptr<RequestLog> log = nullptr);

/// The same backend bound to every role (and as the single plausibility judge).
BackendBindings uniform_bindings(BackendPtr backend);

}  // namespace esckit
