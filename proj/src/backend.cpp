#include "esckit/backend.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "esckit/text.hpp"

namespace esckit {

using nlohmann::json;

namespace {

constexpr std::pair<RoleTag, std::string_view> kRoleNames[] = {
    {RoleTag::generator, "generator"},   {RoleTag::modifier, "modifier"},
    {RoleTag::reviewer, "reviewer"},     {RoleTag::judger, "judger"},
    {RoleTag::profiler, "profiler"},     {RoleTag::summarizer, "summarizer"},
    {RoleTag::planner, "planner"},       {RoleTag::supporter, "supporter"},
    {RoleTag::plausibility_judge, "plausibility_judge"},
};

}  // namespace

std::string_view to_string(RoleTag role) {
    for (const auto& [tag, name] : kRoleNames)
        if (tag == role) return name;
    return "?";
}

std::optional<RoleTag> role_from_string(std::string_view name) {
    for (const auto& [tag, n] : kRoleNames)
        if (n == name) return tag;
    return std::nullopt;
}

const std::vector<RoleTag>& all_roles() {
    static const std::vector<RoleTag> roles = [] {
        std::vector<RoleTag> out;
        for (const auto& entry : kRoleNames) out.push_back(entry.first);
        return out;
    }();
    return roles;
}

double default_temperature(RoleTag role) {
    switch (role) {
        case RoleTag::reviewer:
        case RoleTag::judger:
        case RoleTag::plausibility_judge:
        case RoleTag::profiler:
        case RoleTag::planner:
            return 0.0;
        case RoleTag::summarizer:
            return 0.3;
        case RoleTag::generator:
        case RoleTag::modifier:
        case RoleTag::supporter:
            return 0.7;
    }
    return 0.0;
}

std::string_view to_string(MessageRole role) {
    switch (role) {
        case MessageRole::system_prompt: return "system";
        case MessageRole::user: return "user";
        case MessageRole::assistant: return "assistant";
    }
    return "?";
}

const std::string& ChatRequest::last_text() const {
    static const std::string empty;
    return messages.empty() ? empty : messages.back().text;
}

void ChatRequest::validate() const {
    if (messages.empty()) throw Error(ErrorCode::InvalidArgument, "chat request has no messages");
    if (messages.front().role != MessageRole::system_prompt)
        throw Error(ErrorCode::InvalidArgument, "chat request must start with a system prompt");
    if (temperature < 0.0) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 0");
    if (max_output_tokens <= 0) throw Error(ErrorCode::InvalidArgument, "max_output_tokens must be positive");
}

ChatRequest make_request(RoleTag role, std::string system_prompt, std::string user_text, std::string request_id) {
    ChatRequest req;
    req.role = role;
    req.temperature = default_temperature(role);
    req.request_id = std::move(request_id);
    req.messages.push_back({MessageRole::system_prompt, std::move(system_prompt)});
    req.messages.push_back({MessageRole::user, std::move(user_text)});
    return req;
}

// --- RequestLog -------------------------------------------------------------

void RequestLog::record(std::string_view request_id, std::string_view backend, RoleTag role, int attempt,
                        std::string_view outcome, int status, std::chrono::milliseconds latency) {
    json rec = {{"request_id", request_id}, {"backend", backend},   {"role", to_string(role)},
                {"attempt", attempt},       {"outcome", outcome},   {"status", status},
                {"latency_ms", latency.count()}};
    std::lock_guard lock(mu_);
    *out_ << rec.dump() << '\n';
    out_->flush();
}

// --- ScriptedBackend --------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<ScriptRule> script, std::string name)
    : script_(std::move(script)), consumed_(script_.size(), false), name_(std::move(name)) {}

ChatResponse ScriptedBackend::complete(const ChatRequest& request) {
    request.validate();
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < script_.size(); ++i) {
        if (consumed_[i]) continue;
        const auto& rule = script_[i];
        if (rule.role && *rule.role != request.role) continue;
        if (!rule.contains.empty() && request.last_text().find(rule.contains) == std::string::npos) continue;
        std::string reply;
        if (rule.responder) {
            auto r = rule.responder(request);
            if (!r) continue;
            reply = std::move(*r);
        } else {
            reply = rule.reply;
        }
        if (!rule.repeat) consumed_[i] = true;
        if (rule.raise) throw Error(*rule.raise, "scripted failure for " + request.request_id);
        transcript_.push_back({request, reply});
        return ChatResponse{text::trim_trailing(reply), name_, std::chrono::milliseconds{0}, false};
    }
    throw Error(ErrorCode::ScriptExhausted,
                std::string(to_string(request.role)) + " request " + request.request_id);
}

std::vector<ServedRequest> ScriptedBackend::transcript() const {
    std::lock_guard lock(mu_);
    return transcript_;
}

std::size_t ScriptedBackend::served_count() const {
    std::lock_guard lock(mu_);
    return transcript_.size();
}

std::size_t ScriptedBackend::served_count(RoleTag role) const {
    std::lock_guard lock(mu_);
    return static_cast<std::size_t>(std::count_if(transcript_.begin(), transcript_.end(),
                                                  [&](const ServedRequest& s) { return s.request.role == role; }));
}

void ScriptedBackend::clear_transcript() {
    std::lock_guard lock(mu_);
    transcript_.clear();
}

std::shared_ptr<ScriptedBackend> scripted_backend(std::vector<ScriptRule> script, std::string name) {
    if (script.empty()) throw Error(ErrorCode::InvalidArgument, "script must not be empty");
    return std::make_shared<ScriptedBackend>(std::move(script), std::move(name));
}

// --- BackendConfig ----------------------------------------------------------

void BackendConfig::validate() const {
    if (name.empty()) throw Error(ErrorCode::BadConfig, "backend name is empty");
    if (endpoint.empty()) throw Error(ErrorCode::BadConfig, name + ": endpoint is empty");
    if (timeout.count() <= 0) throw Error(ErrorCode::BadConfig, name + ": timeout must be positive");
    if (max_retries < 0 || max_retries > 10) throw Error(ErrorCode::BadConfig, name + ": max_retries must be in 0..10");
    if (backoff_initial.count() < 0 || backoff_multiplier < 1.0)
        throw Error(ErrorCode::BadConfig, name + ": backoff must be non-negative with multiplier >= 1");
    if (max_parallel <= 0) throw Error(ErrorCode::BadConfig, name + ": max_parallel must be positive");
    if (!adapter_for_vendor(vendor)) throw Error(ErrorCode::BadConfig, name + ": unknown vendor " + vendor);
}

namespace {

std::string env_key(const std::string& name, std::string_view suffix) {
    std::string key = "ESCKIT_";
    for (char c : name) key.push_back(std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::toupper(c)) : '_');
    key += '_';
    key += suffix;
    return key;
}

std::optional<std::string> getenv_str(const std::string& key) {
    if (const char* v = std::getenv(key.c_str()); v && *v) return std::string(v);
    return std::nullopt;
}

}  // namespace

BackendConfig backend_config_from_env(const std::string& name) {
    BackendConfig cfg;
    cfg.name = name;
    cfg.credential_env = env_key(name, "API_KEY");
    if (auto v = getenv_str(env_key(name, "ENDPOINT"))) cfg.endpoint = *v;
    if (auto v = getenv_str(env_key(name, "MODEL"))) cfg.model = *v;
    if (auto v = getenv_str(env_key(name, "VENDOR"))) cfg.vendor = *v;
    try {
        if (auto v = getenv_str(env_key(name, "TIMEOUT_MS"))) cfg.timeout = std::chrono::milliseconds(std::stol(*v));
        if (auto v = getenv_str(env_key(name, "MAX_RETRIES"))) cfg.max_retries = std::stoi(*v);
    } catch (const std::exception&) {
        throw Error(ErrorCode::BadConfig, name + ": numeric environment override is not a number");
    }
    return cfg;
}

// --- Wire adapters ----------------------------------------------------------

namespace {

class OpenAiAdapter : public WireAdapter {
public:
    std::string path_suffix() const override { return "/chat/completions"; }

    HttpHeaders headers(const std::string& credential) const override {
        HttpHeaders h;
        if (!credential.empty()) h.emplace_back("Authorization", "Bearer " + credential);
        return h;
    }

    std::string encode(const ChatRequest& request, const BackendConfig& cfg) const override {
        json messages = json::array();
        for (const auto& m : request.messages) messages.push_back({{"role", to_string(m.role)}, {"content", m.text}});
        json body = {{"messages", messages},
                     {"temperature", request.temperature},
                     {"max_tokens", request.max_output_tokens}};
        if (!cfg.model.empty()) body["model"] = cfg.model;
        return body.dump();
    }

    DecodedReply decode(const std::string& body) const override {
        try {
            auto doc = json::parse(body);
            const auto& choice = doc.at("choices").at(0);
            DecodedReply out;
            const auto& content = choice.at("message").at("content");
            out.text = content.is_null() ? std::string{} : content.get<std::string>();
            out.truncated = choice.value("finish_reason", std::string{}) == "length";
            return out;
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ProtocolError, std::string("unexpected response shape: ") + e.what());
        }
    }
};

class AnthropicAdapter : public WireAdapter {
public:
    std::string path_suffix() const override { return "/messages"; }

    HttpHeaders headers(const std::string& credential) const override {
        HttpHeaders h{{"anthropic-version", "2023-06-01"}};
        if (!credential.empty()) h.emplace_back("x-api-key", credential);
        return h;
    }

    std::string encode(const ChatRequest& request, const BackendConfig& cfg) const override {
        json messages = json::array();
        std::string system;
        for (const auto& m : request.messages) {
            if (m.role == MessageRole::system_prompt) {
                if (!system.empty()) system += "\n\n";
                system += m.text;
            } else {
                messages.push_back({{"role", to_string(m.role)}, {"content", m.text}});
            }
        }
        json body = {{"system", system},
                     {"messages", messages},
                     {"temperature", request.temperature},
                     {"max_tokens", request.max_output_tokens}};
        if (!cfg.model.empty()) body["model"] = cfg.model;
        return body.dump();
    }

    DecodedReply decode(const std::string& body) const override {
        try {
            auto doc = json::parse(body);
            DecodedReply out;
            for (const auto& block : doc.at("content"))
                if (block.value("type", std::string{}) == "text") out.text += block.at("text").get<std::string>();
            out.truncated = doc.value("stop_reason", std::string{}) == "max_tokens";
            return out;
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ProtocolError, std::string("unexpected response shape: ") + e.what());
        }
    }
};

bool retryable_status(int status) {
    return status == 408 || status == 429 || status == 500 || status == 502 || status == 503 || status == 504;
}

}  // namespace

std::unique_ptr<WireAdapter> adapter_for_vendor(std::string_view vendor) {
    if (vendor == "openai") return std::make_unique<OpenAiAdapter>();
    if (vendor == "anthropic") return std::make_unique<AnthropicAdapter>();
    return nullptr;
}

// --- HttpBackend ------------------------------------------------------------

HttpBackend::HttpBackend(BackendConfig cfg, std::shared_ptr<HttpTransport> transport, std::shared_ptr<RequestLog> log,
                         Sleeper sleeper)
    : cfg_((cfg.validate(), std::move(cfg))),
      adapter_(adapter_for_vendor(cfg_.vendor)),
      transport_(std::move(transport)),
      log_(std::move(log)),
      sleeper_(sleeper ? std::move(sleeper) : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })),
      inflight_(cfg_.max_parallel) {}

ChatResponse HttpBackend::complete(const ChatRequest& request) {
    request.validate();
    std::string credential;
    if (!cfg_.credential_env.empty()) {
        const char* v = std::getenv(cfg_.credential_env.c_str());
        if (!v || !*v) throw Error(ErrorCode::AuthError, cfg_.name + ": credential variable " + cfg_.credential_env + " is not set");
        credential = v;
    }
    const std::string url = cfg_.endpoint + adapter_->path_suffix();
    const std::string body = adapter_->encode(request, cfg_);
    const HttpHeaders headers = adapter_->headers(credential);

    inflight_.acquire();
    struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
    } release{inflight_};

    auto backoff = cfg_.backoff_initial;
    ErrorCode last_failure = ErrorCode::Unavailable;
    std::string last_detail;
    for (int attempt = 1; attempt <= 1 + cfg_.max_retries; ++attempt) {
        if (attempt > 1) {
            sleeper_(backoff);
            backoff = std::chrono::milliseconds(static_cast<long>(static_cast<double>(backoff.count()) * cfg_.backoff_multiplier));
        }
        ++attempts_;
        const auto start = std::chrono::steady_clock::now();
        HttpReply reply = transport_->post(url, headers, body, cfg_.timeout);
        const auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);

        auto log = [&](std::string_view outcome) {
            if (log_) log_->record(request.request_id, cfg_.name, request.role, attempt, outcome, reply.status, latency);
        };

        if (reply.failure == TransportFailure::timeout) {
            log("timeout");
            last_failure = ErrorCode::Timeout;
            last_detail = reply.error;
            continue;
        }
        if (reply.failure == TransportFailure::connection) {
            log("connection_error");
            last_failure = ErrorCode::Unavailable;
            last_detail = reply.error;
            continue;
        }
        if (reply.status == 401 || reply.status == 403) {
            log("auth_error");
            throw Error(ErrorCode::AuthError, cfg_.name + ": HTTP " + std::to_string(reply.status));
        }
        if (retryable_status(reply.status)) {
            log("retryable_status");
            last_failure = reply.status == 429 ? ErrorCode::RateLimited
                           : reply.status == 408 ? ErrorCode::Timeout
                                                 : ErrorCode::Unavailable;
            last_detail = "HTTP " + std::to_string(reply.status);
            continue;
        }
        if (reply.status < 200 || reply.status >= 300) {
            log("protocol_error");
            throw Error(ErrorCode::ProtocolError, cfg_.name + ": HTTP " + std::to_string(reply.status));
        }
        DecodedReply decoded;
        try {
            decoded = adapter_->decode(reply.body);
        } catch (const Error&) {
            log("protocol_error");
            throw;
        }
        log("ok");
        return ChatResponse{text::trim_trailing(decoded.text), cfg_.name, latency, decoded.truncated};
    }
    throw Error(last_failure, cfg_.name + ": " + std::to_string(1 + cfg_.max_retries) + " attempts failed (" + last_detail + ")");
}

// --- BoundedBackend ---------------------------------------------------------

BoundedBackend::BoundedBackend(BackendPtr inner, std::shared_ptr<std::counting_semaphore<>> gate)
    : inner_(std::move(inner)), gate_(std::move(gate)) {}

ChatResponse BoundedBackend::complete(const ChatRequest& request) {
    gate_->acquire();
    struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
    } release{*gate_};
    return inner_->complete(request);
}

// --- Bindings ---------------------------------------------------------------

BackendPtr BackendBindings::for_role(RoleTag role) const {
    auto it = roles.find(role);
    if (it == roles.end() || !it->second)
        throw Error(ErrorCode::BadConfig, "no backend bound to role " + std::string(to_string(role)));
    return it->second;
}

std::map<std::string, std::string> BackendBindings::describe() const {
    std::map<std::string, std::string> out;
    for (const auto& [role, backend] : roles) out[std::string(to_string(role))] = backend ? backend->name() : "";
    return out;
}

namespace {

ScriptRule parse_rule(const json& j) {
    ScriptRule rule;
    if (auto it = j.find("role"); it != j.end()) {
        auto role = role_from_string(it->get<std::string>());
        if (!role) throw Error(ErrorCode::BadConfig, "unknown role " + it->get<std::string>());
        rule.role = role;
    }
    rule.contains = j.value("contains", std::string{});
    rule.reply = j.value("reply", std::string{});
    rule.repeat = j.value("repeat", false);
    return rule;
}

BackendPtr build_backend(const std::string& name, const json& spec, const std::shared_ptr<RequestLog>& log) {
    const auto type = spec.value("type", std::string("http"));
    if (type == "scripted") {
        std::vector<ScriptRule> rules;
        for (const auto& r : spec.at("script")) rules.push_back(parse_rule(r));
        return scripted_backend(std::move(rules), name);
    }
    if (type != "http") throw Error(ErrorCode::BadConfig, name + ": unknown backend type " + type);
    BackendConfig cfg = backend_config_from_env(name);
    cfg.vendor = spec.value("vendor", cfg.vendor);
    cfg.endpoint = spec.value("endpoint", cfg.endpoint);
    cfg.model = spec.value("model", cfg.model);
    cfg.credential_env = spec.value("credential_env", cfg.credential_env);
    cfg.timeout = std::chrono::milliseconds(spec.value("timeout_ms", static_cast<long>(cfg.timeout.count())));
    cfg.max_retries = spec.value("max_retries", cfg.max_retries);
    cfg.backoff_initial = std::chrono::milliseconds(spec.value("backoff_ms", static_cast<long>(cfg.backoff_initial.count())));
    cfg.backoff_multiplier = spec.value("backoff_multiplier", cfg.backoff_multiplier);
    cfg.max_parallel = spec.value("max_parallel", cfg.max_parallel);
    return std::make_shared<HttpBackend>(std::move(cfg), make_default_transport(), log);
}

}  // namespace

BackendBindings parse_bindings(std::string_view document, std::shared_ptr<RequestLog> log) {
    json root;
    try {
        root = json::parse(document.begin(), document.end());
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::BadConfig, std::string("bindings: ") + e.what());
    }
    BackendBindings out;
    try {
        for (const auto& [name, spec] : root.at("backends").items()) out.backends[name] = build_backend(name, spec, log);
        auto lookup = [&](const std::string& name) {
            auto it = out.backends.find(name);
            if (it == out.backends.end()) throw Error(ErrorCode::BadConfig, "unknown backend " + name);
            return it->second;
        };
        if (auto it = root.find("roles"); it != root.end()) {
            for (const auto& [role_name, backend_name] : it->items()) {
                auto role = role_from_string(role_name);
                if (!role) throw Error(ErrorCode::BadConfig, "unknown role " + role_name);
                out.roles[*role] = lookup(backend_name.get<std::string>());
            }
        }
        if (auto it = root.find("plausibility_judges"); it != root.end()) {
            for (const auto& name : *it) out.plausibility_judges.push_back(lookup(name.get<std::string>()));
        } else if (auto r = out.roles.find(RoleTag::plausibility_judge); r != out.roles.end()) {
            out.plausibility_judges.push_back(r->second);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::BadConfig, std::string("bindings: ") + e.what());
    }
    return out;
}

BackendBindings load_bindings(const std::filesystem::path& path, std::shared_ptr<RequestLog> log) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_bindings(buf.str(), std::move(log));
}

BackendBindings uniform_bindings(BackendPtr backend) {
    BackendBindings out;
    out.backends[backend->name()] = backend;
    for (auto role : all_roles()) out.roles[role] = backend;
    out.plausibility_judges.push_back(backend);
    return out;
}

}  // namespace esckit
