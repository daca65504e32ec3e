#include "esckit/service.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <random>

#include <json.hpp>

#include "esckit/error.hpp"
#include "esckit/text.hpp"

namespace esckit {

using ojson = nlohmann::ordered_json;

namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

ojson optional_json(const std::optional<std::string>& v) { return v ? ojson(*v) : ojson(nullptr); }

ojson profile_obj(const std::optional<Profile>& p) { return p ? ojson::parse(profile_json(*p)) : ojson(nullptr); }
ojson summary_obj(const std::optional<Summary>& s) { return s ? ojson::parse(summary_json(*s)) : ojson(nullptr); }

std::optional<Profile> profile_from(const ojson& j) {
    if (j.is_null()) return std::nullopt;
    Profile p;
    if (!j.at("group").is_null()) p.group_id = j.at("group").get<std::string>();
    p.problem_ids = j.at("problems").get<std::vector<std::string>>();
    p.cause_ids = j.at("causes").get<std::vector<std::string>>();
    p.focus_ids = j.at("focuses").get<std::vector<std::string>>();
    p.notes = j.at("notes").get<std::string>();
    return p;
}

std::optional<Summary> summary_from(const ojson& j) {
    if (j.is_null()) return std::nullopt;
    return Summary{j.at("condensed_history").get<std::string>(), j.at("emotion").get<std::string>(),
                   j.at("intent").get<std::string>(), j.at("psychological_state").get<std::string>()};
}

ojson config_obj(const SessionConfig& c) { return {{"taxonomy", c.taxonomy}, {"ablation", ablation_names(c.ablation)}}; }

void append_user_text(SessionState& state, const std::string& text) {
    if (!state.transcript.empty() && state.transcript.back().speaker == Speaker::user) {
        state.transcript.back().text += "\n" + text;
    } else {
        state.transcript.push_back({Speaker::user, text, std::nullopt});
    }
}

std::string strategy_name(const LabelSet& taxonomy, const std::optional<std::string>& id) {
    if (!id) return {};
    const auto* s = taxonomy.find_strategy(*id);
    return s ? s->name : *id;
}

}  // namespace

struct ChatService::Session {
    std::mutex mu;
    std::string id;
    std::string created_at;
    SessionConfig config;
    SessionState state;
    std::vector<std::string> debug_history;
};

struct ChatService::Store {
    std::filesystem::path path;
    std::ofstream out;
    std::mutex mu;

    void append(const ojson& event) {
        const auto line = event.dump();
        std::lock_guard lock(mu);
        out << line << '\n';
        out.flush();
        if (!out) throw Error(ErrorCode::IoError, "cannot append to session store " + path.string());
    }
};

ChatService::ChatService(ServiceOptions options) : options_(std::move(options)) {
    if (options_.taxonomies.empty()) throw Error(ErrorCode::BadConfig, "taxonomies");
    for (const auto& t : options_.taxonomies) {
        if (engines_.count(t.profile)) throw Error(ErrorCode::DuplicateId, "taxonomy profile " + t.profile);
        engines_.emplace(t.profile, std::make_unique<Engine>(t, options_.bindings, options_.engine, options_.prompts));
    }
    std::random_device rd;
    id_state_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
                static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
    if (!options_.store.empty()) {
        replay();
        store_ = std::make_unique<Store>();
        store_->path = options_.store;
        // A torn final line from a crash must not swallow the next record.
        bool needs_newline = false;
        if (std::filesystem::exists(options_.store) && std::filesystem::file_size(options_.store) > 0) {
            std::ifstream in(options_.store, std::ios::binary);
            in.seekg(-1, std::ios::end);
            needs_newline = in.get() != '\n';
        }
        store_->out.open(options_.store, std::ios::binary | std::ios::app);
        if (!store_->out) throw Error(ErrorCode::IoError, "cannot open session store " + options_.store.string());
        if (needs_newline) store_->out << '\n';
    }
}

ChatService::~ChatService() = default;

const Engine& ChatService::engine_for(const std::string& profile) const {
    if (profile.empty()) return *engines_.at(options_.taxonomies.front().profile);
    auto it = engines_.find(profile);
    if (it == engines_.end()) throw Error(ErrorCode::BadConfig, "taxonomy: unknown profile " + profile);
    return *it->second;
}

const LabelSet& ChatService::taxonomy(const std::string& profile) const { return engine_for(profile).taxonomy(); }

std::vector<std::string> ChatService::profiles() const {
    std::vector<std::string> out;
    for (const auto& t : options_.taxonomies) out.push_back(t.profile);
    return out;
}

std::string ChatService::new_session_id() {
    std::lock_guard lock(id_mu_);
    std::mt19937_64 rng(id_state_);
    id_state_ = rng();
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(rng()));
    return buf;
}

std::shared_ptr<ChatService::Session> ChatService::find(const std::string& session_id) const {
    std::shared_lock lock(sessions_mu_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw Error(ErrorCode::NotFound, "no session " + session_id);
    return it->second;
}

std::string ChatService::create_session(const SessionConfig& requested) {
    SessionConfig config = requested;
    const auto& engine = engine_for(config.taxonomy);
    config.taxonomy = engine.taxonomy().profile;
    config.ablation.erase(Agent::supporter);

    auto session = std::make_shared<Session>();
    session->created_at = utc_now();
    session->config = config;
    {
        std::unique_lock lock(sessions_mu_);
        do {
            session->id = new_session_id();
        } while (sessions_.count(session->id));
        session->state = new_session(session->id, engine.taxonomy(), config.ablation);
        if (store_)
            store_->append({{"event", "created"},
                            {"session_id", session->id},
                            {"created_at", session->created_at},
                            {"config", config_obj(config)}});
        sessions_.emplace(session->id, session);
    }
    return session->id;
}

MessageEnvelope ChatService::post_message(const std::string& session_id, const std::string& text) {
    auto session = find(session_id);
    const std::string trimmed(text::trim(text));
    if (trimmed.empty()) throw Error(ErrorCode::EmptyMessage, "message text is empty");
    const auto& engine = engine_for(session->config.taxonomy);

    std::lock_guard lock(session->mu);
    StepResult result;
    try {
        result = engine.step(session->state, trimmed);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::UpstreamBackendError && store_)
            store_->append({{"event", "user_pending"}, {"session_id", session->id}, {"user", trimmed}});
        throw;
    }
    const auto debug = debug_json(result.debug);
    session->debug_history.push_back(debug);
    if (store_) {
        const auto& st = session->state;
        store_->append({{"event", "turn"},
                        {"session_id", session->id},
                        {"user", trimmed},
                        {"reply", {{"text", result.reply.text}, {"strategy", optional_json(result.reply.strategy_id)}}},
                        {"debug", ojson::parse(debug)},
                        {"profile", profile_obj(st.profile)},
                        {"summary", summary_obj(st.summary)},
                        {"last_strategy", optional_json(st.last_strategy)},
                        {"profiled_at", st.profiled_at},
                        {"fallback_count", st.fallback_count}});
    }
    return MessageEnvelope{result.reply.text, result.reply.strategy_id, result.debug, session->state.turn_index};
}

SessionView ChatService::get_session(const std::string& session_id) const {
    auto session = find(session_id);
    std::lock_guard lock(session->mu);
    return SessionView{session->id, session->created_at, session->config, session->state, session->debug_history};
}

std::vector<std::string> ChatService::session_ids() const {
    std::shared_lock lock(sessions_mu_);
    std::vector<std::string> out;
    for (const auto& [id, _] : sessions_) out.push_back(id);
    return out;
}

void ChatService::replay() {
    if (!std::filesystem::exists(options_.store)) return;
    std::ifstream in(options_.store, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot read session store " + options_.store.string());
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        ojson ev;
        try {
            ev = ojson::parse(line);
        } catch (const ojson::parse_error&) {
            continue;  // torn write
        }
        try {
            const auto kind = ev.at("event").get<std::string>();
            const auto id = ev.at("session_id").get<std::string>();
            if (kind == "created") {
                auto s = std::make_shared<Session>();
                s->id = id;
                s->created_at = ev.at("created_at").get<std::string>();
                s->config.taxonomy = ev.at("config").at("taxonomy").get<std::string>();
                s->config.ablation = parse_ablation(ev.at("config").at("ablation").get<std::vector<std::string>>());
                s->state = new_session(id, engine_for(s->config.taxonomy).taxonomy(), s->config.ablation);
                sessions_[id] = std::move(s);
                continue;
            }
            auto it = sessions_.find(id);
            if (it == sessions_.end()) throw Error(ErrorCode::SchemaError, "event for unknown session " + id, line_no);
            auto& st = it->second->state;
            append_user_text(st, ev.at("user").get<std::string>());
            if (kind == "turn") {
                const auto& reply = ev.at("reply");
                Utterance u{Speaker::system, reply.at("text").get<std::string>(), std::nullopt};
                if (!reply.at("strategy").is_null()) u.strategy_id = reply.at("strategy").get<std::string>();
                st.transcript.push_back(std::move(u));
                st.profile = profile_from(ev.at("profile"));
                st.summary = summary_from(ev.at("summary"));
                if (!ev.at("last_strategy").is_null()) st.last_strategy = ev.at("last_strategy").get<std::string>();
                st.profiled_at = ev.at("profiled_at").get<std::size_t>();
                st.fallback_count = ev.at("fallback_count").get<std::size_t>();
                ++st.turn_index;
                it->second->debug_history.push_back(ev.at("debug").dump());
            } else if (kind != "user_pending") {
                throw Error(ErrorCode::SchemaError, "unknown event " + kind, line_no);
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::SchemaError, std::string("session store: ") + e.what(), line_no);
        }
    }
}

// --- JSON views -------------------------------------------------------------------------------

std::string debug_json(const StepDebug& d) {
    ojson agents = ojson::array();
    for (auto a : d.agents_called) agents.push_back(to_string(a));
    ojson j{{"profile", profile_obj(d.profile)},
            {"summary", summary_obj(d.summary)},
            {"strategy", optional_json(d.strategy)},
            {"fallback_used", d.fallback_used},
            {"agents", agents}};
    return j.dump();
}

std::string envelope_json(const MessageEnvelope& e, const LabelSet& taxonomy) {
    ojson j{{"reply", e.reply},
            {"strategy_id", optional_json(e.strategy_id)},
            {"strategy_name", e.strategy_id ? ojson(strategy_name(taxonomy, e.strategy_id)) : ojson(nullptr)},
            {"debug", ojson::parse(debug_json(e.debug))},
            {"turn_index", e.turn_index},
            {"final", true}};
    return j.dump();
}

std::string session_json(const SessionView& v, const LabelSet& taxonomy) {
    ojson transcript = ojson::array();
    for (const auto& u : v.state.transcript) {
        ojson ju{{"speaker", to_string(u.speaker)}, {"text", u.text}};
        ju["strategy_id"] = optional_json(u.strategy_id);
        ju["strategy_name"] = u.strategy_id ? ojson(strategy_name(taxonomy, u.strategy_id)) : ojson(nullptr);
        transcript.push_back(std::move(ju));
    }
    ojson debug = ojson::array();
    for (const auto& d : v.debug_history) debug.push_back(ojson::parse(d));
    ojson j{{"session_id", v.session_id},
            {"created_at", v.created_at},
            {"config", config_obj(v.config)},
            {"turn_index", v.state.turn_index},
            {"fallback_count", v.state.fallback_count},
            {"transcript", std::move(transcript)},
            {"debug_history", std::move(debug)}};
    return j.dump();
}

std::string taxonomy_json(const LabelSet& t, const std::vector<std::string>& profiles) {
    auto labels = [](const std::vector<LabelDef>& list) {
        ojson out = ojson::array();
        for (const auto& l : list)
            out.push_back({{"id", l.id}, {"name", l.name}, {"name_alt", l.name_alt}, {"placeholder", l.placeholder}});
        return out;
    };
    ojson strategies = ojson::array();
    for (const auto& s : t.strategies)
        strategies.push_back({{"id", s.id},
                              {"name", s.name},
                              {"name_alt", s.name_alt},
                              {"description", s.description},
                              {"placeholder", s.placeholder}});
    ojson j{{"profile", t.profile},
            {"profiles", profiles},
            {"language", t.language},
            {"greeting", t.greeting},
            {"default_strategy", t.default_strategy},
            {"ablations", {"profiler", "summarizer", "planner"}},
            {"groups", labels(t.groups)},
            {"problems", labels(t.problems)},
            {"causes", labels(t.causes)},
            {"focuses", labels(t.focuses)},
            {"strategies", std::move(strategies)}};
    return j.dump();
}

std::string error_json(const std::string& code, const std::string& message) {
    return ojson{{"code", code}, {"message", message}}.dump();
}

int http_status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::NotFound: return 404;
        case ErrorCode::EmptyMessage:
        case ErrorCode::BadConfig:
        case ErrorCode::InvalidArgument:
        case ErrorCode::SchemaError:
        case ErrorCode::ParseError: return 400;
        case ErrorCode::UpstreamBackendError: return 502;
        default: return 500;
    }
}

std::string client_message(const Error& e) {
    if (e.code() != ErrorCode::UpstreamBackendError) return e.detail();
    // "<agent>: <code>: <detail>" -> keep agent and code only; backend
    // details may name hosts.
    const auto& d = e.detail();
    const auto first = d.find(": ");
    if (first == std::string::npos) return "backend failure";
    const auto second = d.find(": ", first + 2);
    return d.substr(0, second == std::string::npos ? d.size() : second) + " (the message was kept; retry to continue)";
}

}  // namespace esckit
