#include "esckit/engine.hpp"

#include <algorithm>
#include <cctype>

#include <json.hpp>

#include "ask.hpp"
#include "esckit/error.hpp"
#include "esckit/synthesis.hpp"
#include "esckit/text.hpp"

namespace esckit {

using ojson = nlohmann::ordered_json;

std::string_view to_string(Agent agent) {
    switch (agent) {
        case Agent::profiler: return "profiler";
        case Agent::summarizer: return "summarizer";
        case Agent::planner: return "planner";
        case Agent::supporter: return "supporter";
    }
    return "?";
}

Ablation parse_ablation(const std::vector<std::string>& names) {
    Ablation out;
    for (const auto& raw : names) {
        auto name = text::normalize_label(raw);
        if (name.rfind("w/o", 0) == 0) name = std::string(text::trim(std::string_view(name).substr(3)));
        if (name == "profiler") {
            out.insert(Agent::profiler);
        } else if (name == "summarizer") {
            out.insert(Agent::summarizer);
        } else if (name == "planner") {
            out.insert(Agent::planner);
        } else if (name == "all") {
            out = {Agent::profiler, Agent::summarizer, Agent::planner};
        } else if (!name.empty()) {
            throw Error(ErrorCode::BadConfig, "unknown ablation " + raw);
        }
    }
    return out;
}

std::vector<std::string> ablation_names(const Ablation& ablation) {
    std::vector<std::string> out;
    for (auto a : {Agent::planner, Agent::summarizer, Agent::profiler})
        if (ablation.count(a)) out.emplace_back(to_string(a));
    return out;
}

std::string ablation_label(const Ablation& ablation) {
    if (ablation.empty()) return "full";
    if (ablation.size() == 3) return "w/o all";
    return "w/o " + text::join(ablation_names(ablation), "&");
}

const std::vector<Ablation>& table_ablations() {
    static const std::vector<Ablation> rows = {
        {},
        {Agent::planner},
        {Agent::summarizer},
        {Agent::profiler},
        {Agent::planner, Agent::summarizer},
        {Agent::planner, Agent::profiler},
        {Agent::summarizer, Agent::profiler},
        {Agent::planner, Agent::summarizer, Agent::profiler},
    };
    return rows;
}

// --- Parsing agent replies ------------------------------------------------------------

namespace {

struct Field {
    std::size_t key_pos;
    std::size_t value_pos;
    std::string key;
};

// Finds "key:" occurrences at word starts, for any of `keys`, in order.
std::vector<Field> find_fields(std::string_view reply, const std::vector<std::string>& keys) {
    const auto lower = text::to_lower_ascii(reply);
    std::vector<Field> out;
    for (const auto& key : keys) {
        std::size_t pos = 0;
        while ((pos = lower.find(key, pos)) != std::string::npos) {
            const bool word_start = pos == 0 || !std::isalpha(static_cast<unsigned char>(lower[pos - 1]));
            std::size_t p = pos + key.size();
            while (p < lower.size() && (lower[p] == ' ' || lower[p] == '*' || lower[p] == '\t')) ++p;
            std::size_t value = std::string::npos;
            if (p < lower.size() && lower[p] == ':') {
                value = p + 1;
            } else if (lower.compare(p, 3, "\xEF\xBC\x9A") == 0) {
                value = p + 3;
            }
            if (word_start && value != std::string::npos) out.push_back({pos, value, key});
            pos += key.size();
        }
    }
    std::sort(out.begin(), out.end(), [](const Field& a, const Field& b) { return a.key_pos < b.key_pos; });
    return out;
}

// key -> value, first occurrence wins; values run to the next key.
std::map<std::string, std::string> split_fields(std::string_view reply, const std::vector<std::string>& keys) {
    const auto fields = find_fields(reply, keys);
    std::map<std::string, std::string> out;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        const auto end = i + 1 < fields.size() ? fields[i + 1].key_pos : reply.size();
        std::string value(text::trim(reply.substr(fields[i].value_pos, end - fields[i].value_pos)));
        while (!value.empty() && (value.back() == ';' || value.back() == ',' || value.back() == '*'))
            value = std::string(text::trim(value.substr(0, value.size() - 1)));
        out.emplace(fields[i].key, std::move(value));
    }
    return out;
}

std::vector<std::string> split_items(std::string value) {
    for (std::string_view sep : {"\xEF\xBC\x8C", "\xE3\x80\x81", "\xEF\xBC\x9B", ";", "/", "\n"}) {
        std::size_t pos = 0;
        while ((pos = value.find(sep, pos)) != std::string::npos) value.replace(pos, sep.size(), ",");
    }
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= value.size()) {
        auto end = value.find(',', start);
        if (end == std::string::npos) end = value.size();
        auto item = text::trim(std::string_view(value).substr(start, end - start));
        while (!item.empty() && std::string_view("-*.\"'[]").find(item.front()) != std::string_view::npos)
            item = text::trim(item.substr(1));
        while (!item.empty() && std::string_view("*.\"'[]").find(item.back()) != std::string_view::npos)
            item = text::trim(item.substr(0, item.size() - 1));
        if (!item.empty() && text::normalize_label(item) != "none" && text::normalize_label(item) != "unknown")
            out.emplace_back(item);
        start = end + 1;
    }
    return out;
}

void add_note(std::string& notes, const std::string& note) {
    if (!notes.empty()) notes += "; ";
    notes += note;
}

std::string label_names(const std::vector<LabelDef>& labels) {
    std::vector<std::string> names;
    for (const auto& l : labels) names.push_back(l.name);
    return text::join(names, ", ");
}

std::string label_name(const LabelSet& taxonomy, Section section, const std::string& id) {
    const auto* l = taxonomy.find_label(section, id);
    return l ? l->name : id;
}

}  // namespace

Profile parse_profile(std::string_view reply, const LabelSet& taxonomy) {
    Profile p;
    const auto fields = split_fields(reply, {"group", "problems", "causes", "focuses", "notes"});
    if (fields.empty()) {
        p.notes = std::string(text::trim(reply));
        return p;
    }
    auto resolve = [&](const char* key, Section section, std::vector<std::string>& into, std::size_t cap) {
        auto it = fields.find(key);
        if (it == fields.end()) return;
        for (const auto& item : split_items(it->second)) {
            const auto* label = label_by_name(taxonomy, section, item);
            if (!label) {
                add_note(p.notes, std::string(key) + ": " + item);
            } else if (std::find(into.begin(), into.end(), label->id) != into.end()) {
                continue;
            } else if (into.size() >= cap) {
                add_note(p.notes, std::string(key) + ": " + item);
            } else {
                into.push_back(label->id);
            }
        }
    };
    std::vector<std::string> group;
    resolve("group", Section::groups, group, 1);
    if (!group.empty()) p.group_id = group.front();
    resolve("problems", Section::problems, p.problem_ids, 3);
    resolve("causes", Section::causes, p.cause_ids, 3);
    resolve("focuses", Section::focuses, p.focus_ids, 3);
    if (auto it = fields.find("notes"); it != fields.end() && !it->second.empty()) add_note(p.notes, it->second);
    return p;
}

Profile profile_from_situation(const Situation& s) {
    Profile p;
    p.group_id = s.group_id;
    p.problem_ids = s.problem_ids;
    p.cause_ids = s.cause_ids;
    p.focus_ids = s.focus_ids;
    return p;
}

std::string render_profile(const Profile& p, const LabelSet& taxonomy) {
    auto names = [&](Section section, const std::vector<std::string>& ids) {
        std::vector<std::string> out;
        for (const auto& id : ids) out.push_back(label_name(taxonomy, section, id));
        return out.empty() ? std::string("unknown") : text::join(out, ", ");
    };
    std::string out;
    out += "Group: " + (p.group_id ? label_name(taxonomy, Section::groups, *p.group_id) : std::string("unknown")) + "\n";
    out += "Problems: " + names(Section::problems, p.problem_ids) + "\n";
    out += "Causes: " + names(Section::causes, p.cause_ids) + "\n";
    out += "Support focuses: " + names(Section::focuses, p.focus_ids);
    if (!p.notes.empty()) out += "\nNotes: " + p.notes;
    return out;
}

std::optional<Summary> parse_summary(std::string_view reply) {
    const auto fields = split_fields(reply, {"summary", "emotion", "intent", "state"});
    auto get = [&](const char* key) {
        auto it = fields.find(key);
        return it == fields.end() ? std::string{} : it->second;
    };
    Summary s{get("summary"), get("emotion"), get("intent"), get("state")};
    if (s.condensed_history.empty()) return std::nullopt;
    return s;
}

std::string render_summary(const Summary& s) {
    std::string out = "History: " + s.condensed_history;
    if (!s.emotion.empty()) out += "\nEmotion: " + s.emotion;
    if (!s.intent.empty()) out += "\nIntent: " + s.intent;
    if (!s.psychological_state.empty()) out += "\nPsychological state: " + s.psychological_state;
    return out;
}

const StrategyDef* parse_strategy_reply(std::string_view reply, const LabelSet& taxonomy) {
    for (const auto& raw : text::split_lines(reply)) {
        std::string_view line = text::trim(raw);
        if (line.empty()) continue;
        if (const auto* s = strategy_by_name(taxonomy, line)) return s;
        for (std::string_view colon : {":", "\xEF\xBC\x9A"}) {
            const auto c = line.rfind(colon);
            if (c != std::string_view::npos) line = text::trim(line.substr(c + colon.size()));
        }
        while (!line.empty() && std::string_view("*\"'[](`").find(line.front()) != std::string_view::npos)
            line = text::trim(line.substr(1));
        while (!line.empty() && std::string_view("*\"'[]().`").find(line.back()) != std::string_view::npos)
            line = text::trim(line.substr(0, line.size() - 1));
        return strategy_by_name(taxonomy, line);
    }
    return nullptr;
}

// --- Session state -------------------------------------------------------------------------

std::size_t SessionState::user_turns() const {
    return static_cast<std::size_t>(std::count_if(transcript.begin(), transcript.end(),
                                                  [](const Utterance& u) { return u.speaker == Speaker::user; }));
}

SessionState new_session(std::string session_id, const LabelSet& taxonomy, Ablation ablation) {
    ablation.erase(Agent::supporter);
    SessionState s;
    s.session_id = std::move(session_id);
    s.transcript.push_back({Speaker::system, taxonomy.greeting, std::nullopt});
    s.ablation = std::move(ablation);
    return s;
}

// --- Engine ----------------------------------------------------------------------------------

Engine::Engine(LabelSet taxonomy, BackendBindings bindings, EngineConfig config, PromptLibrary prompts)
    : taxonomy_(std::move(taxonomy)), bindings_(std::move(bindings)), config_(config), prompts_(std::move(prompts)) {
    if (config_.profiler_every == 0) throw Error(ErrorCode::BadConfig, "profiler_every must be >= 1");
    if (config_.history_window == 0) throw Error(ErrorCode::BadConfig, "history_window must be >= 1");
    default_strategy_ = config_.default_strategy.empty() ? taxonomy_.default_strategy : config_.default_strategy;
    const auto* s = strategy_by_name(taxonomy_, default_strategy_);
    if (!s) throw Error(ErrorCode::BadConfig, "default strategy " + default_strategy_ + " is not in the taxonomy");
    default_strategy_ = s->id;
}

std::string Engine::request_id(const SessionState& state, Agent agent) const {
    return state.session_id + "/t" + std::to_string(state.user_turns()) + "/" + std::string(to_string(agent));
}

std::string Engine::history(const SessionState& state) const {
    const auto& t = state.transcript;
    const auto from = t.size() > config_.history_window ? t.size() - config_.history_window : 0;
    std::vector<Utterance> window(t.begin() + static_cast<std::ptrdiff_t>(from), t.end());
    return std::string(text::trim(render_transcript(window, taxonomy_)));
}

Profile Engine::run_profiler(const SessionState& state) const {
    std::vector<std::string> lines;
    for (const auto& u : state.transcript)
        if (u.speaker == Speaker::user) lines.push_back("- " + u.text);
    if (lines.empty()) throw Error(ErrorCode::InvalidArgument, "the profiler needs at least one user turn");
    const auto prompt = prompts_.render("profiler", {{"transcript", text::join(lines, "\n")},
                                                     {"groups", label_names(taxonomy_.groups)},
                                                     {"problems", label_names(taxonomy_.problems)},
                                                     {"causes", label_names(taxonomy_.causes)},
                                                     {"focuses", label_names(taxonomy_.focuses)}});
    const auto response = bindings_.for_role(RoleTag::profiler)
                              ->complete(make_request(RoleTag::profiler, prompt.system, prompt.user,
                                                      request_id(state, Agent::profiler) + "/a0"));
    return parse_profile(response.text, taxonomy_);
}

Summary Engine::run_summarizer(const SessionState& state) const {
    if (state.transcript.empty()) throw Error(ErrorCode::InvalidArgument, "empty transcript");
    const auto prompt = prompts_.render(
        "summarizer", {{"transcript", std::string(text::trim(render_transcript(state.transcript, taxonomy_)))}});
    detail::ReplyParser<Summary> parser = [](const std::string& reply, std::string& problem) {
        auto s = parse_summary(reply);
        if (!s) problem = "the \"Summary:\" line is missing or empty";
        return s;
    };
    return detail::ask_with_reasks(*bindings_.for_role(RoleTag::summarizer),
                                   make_request(RoleTag::summarizer, prompt.system, prompt.user,
                                                request_id(state, Agent::summarizer)),
                                   config_.max_reasks, parser, ErrorCode::UnparseableSummary,
                                   "Summary: ...\nEmotion: ...\nIntent: ...\nState: ...", prompts_);
}

std::string Engine::run_planner(const SessionState& state, bool& fallback_used) const {
    std::string menu;
    for (const auto& s : taxonomy_.strategies) menu += "- " + s.name + (s.description.empty() ? "" : ": " + s.description) + "\n";
    const bool use_profile = state.profile && !state.ablation.count(Agent::profiler);
    const bool use_summary = state.summary && !state.ablation.count(Agent::summarizer);
    const auto prompt = prompts_.render(
        "planner", {{"profile", use_profile ? render_profile(*state.profile, taxonomy_) : std::string{}},
                    {"summary", use_summary ? render_summary(*state.summary) : std::string{}},
                    {"history", history(state)},
                    {"strategies", menu}});
    detail::ReplyParser<std::string> parser = [&](const std::string& reply, std::string& problem) {
        if (const auto* s = parse_strategy_reply(reply, taxonomy_)) return std::optional<std::string>(s->id);
        problem = "the reply is not one of the listed strategy names";
        return std::optional<std::string>{};
    };
    fallback_used = false;
    try {
        return detail::ask_with_reasks(*bindings_.for_role(RoleTag::planner),
                                       make_request(RoleTag::planner, prompt.system, prompt.user,
                                                    request_id(state, Agent::planner)),
                                       config_.max_reasks, parser, ErrorCode::UnresolvableStrategy,
                                       "one strategy name from the list", prompts_);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::UnresolvableStrategy) throw;
        fallback_used = true;
        return default_strategy_;
    }
}

Utterance Engine::run_supporter(const SessionState& state, const std::optional<std::string>& strategy) const {
    if (state.transcript.empty() || state.transcript.back().speaker != Speaker::user)
        throw Error(ErrorCode::InvalidArgument, "the supporter needs a transcript ending with a user turn");
    const StrategyDef* def = strategy ? taxonomy_.find_strategy(*strategy) : nullptr;
    if (strategy && !def) throw Error(ErrorCode::UnresolvableStrategy, *strategy);
    const bool use_profile = state.profile && !state.ablation.count(Agent::profiler);
    const bool use_summary = state.summary && !state.ablation.count(Agent::summarizer);
    std::string language = taxonomy_.language == "zh" ? "Chinese" : taxonomy_.language == "en" ? "English" : taxonomy_.language;
    const auto prompt = prompts_.render(
        "supporter", {{"language_name", language},
                      {"profile", use_profile ? render_profile(*state.profile, taxonomy_) : std::string{}},
                      {"summary", use_summary ? render_summary(*state.summary) : std::string{}},
                      {"strategy_name", def ? def->name : std::string{}},
                      {"strategy_guidance", def ? def->guidance : std::string{}},
                      {"history", history(state)}});
    detail::ReplyParser<std::string> parser = [](const std::string& reply, std::string& problem) {
        std::string_view t = text::trim(reply);
        // Drop an echoed speaker prefix such as "System [Comforting]:".
        if (text::starts_with_icase(t, "system")) {
            const auto colon = t.find(':');
            if (colon != std::string_view::npos && colon < 48) t = text::trim(t.substr(colon + 1));
        }
        if (t.empty()) {
            problem = "the reply was empty";
            return std::optional<std::string>{};
        }
        return std::optional<std::string>(std::string(t));
    };
    auto reply = detail::ask_with_reasks(*bindings_.for_role(RoleTag::supporter),
                                         make_request(RoleTag::supporter, prompt.system, prompt.user,
                                                      request_id(state, Agent::supporter)),
                                         config_.max_reasks, parser, ErrorCode::EmptyResponse,
                                         "the counselor's next message", prompts_);
    return Utterance{Speaker::system, std::move(reply), def ? std::optional<std::string>(def->id) : std::nullopt};
}

StepResult Engine::respond(SessionState& state, const Situation* oracle) const {
    if (state.transcript.empty() || state.transcript.back().speaker != Speaker::user)
        throw Error(ErrorCode::InvalidArgument, "respond needs a transcript ending with a user turn");
    SessionState next = state;
    StepResult result;
    Agent current = Agent::profiler;
    try {
        if (!next.ablation.count(Agent::profiler)) {
            const auto u = next.user_turns();
            if (oracle) {
                next.profile = profile_from_situation(*oracle);
                next.profiled_at = u;
            } else if (!next.profile || u >= next.profiled_at + config_.profiler_every) {
                next.profile = run_profiler(next);
                next.profiled_at = u;
                result.debug.agents_called.push_back(Agent::profiler);
            }
        }
        current = Agent::summarizer;
        if (!next.ablation.count(Agent::summarizer)) {
            next.summary = run_summarizer(next);
            result.debug.agents_called.push_back(Agent::summarizer);
        }
        current = Agent::planner;
        std::optional<std::string> strategy;
        if (!next.ablation.count(Agent::planner)) {
            bool fallback = false;
            strategy = run_planner(next, fallback);
            result.debug.agents_called.push_back(Agent::planner);
            result.debug.fallback_used = fallback;
            if (fallback) ++next.fallback_count;
            next.last_strategy = strategy;
        }
        current = Agent::supporter;
        result.reply = run_supporter(next, strategy);
        result.debug.agents_called.push_back(Agent::supporter);
        result.debug.strategy = strategy;
    } catch (const Error& e) {
        throw Error(ErrorCode::UpstreamBackendError,
                    std::string(to_string(current)) + ": " + std::string(to_string(e.code())) + ": " + e.detail());
    }
    next.transcript.push_back(result.reply);
    ++next.turn_index;
    result.debug.profile = next.ablation.count(Agent::profiler) ? std::nullopt : next.profile;
    result.debug.summary = next.ablation.count(Agent::summarizer) ? std::nullopt : next.summary;
    state = std::move(next);
    return result;
}

StepResult Engine::step(SessionState& state, std::string_view user_text) const {
    const auto text = text::trim(user_text);
    if (text.empty()) throw Error(ErrorCode::EmptyMessage, "message text is empty");
    if (!state.transcript.empty() && state.transcript.back().speaker == Speaker::user) {
        state.transcript.back().text += "\n" + std::string(text);
    } else {
        state.transcript.push_back({Speaker::user, std::string(text), std::nullopt});
    }
    return respond(state);
}

std::string profile_json(const Profile& p) {
    ojson j{{"group", p.group_id ? ojson(*p.group_id) : ojson(nullptr)},
            {"problems", p.problem_ids},
            {"causes", p.cause_ids},
            {"focuses", p.focus_ids},
            {"notes", p.notes}};
    return j.dump();
}

std::string summary_json(const Summary& s) {
    ojson j{{"condensed_history", s.condensed_history},
            {"emotion", s.emotion},
            {"intent", s.intent},
            {"psychological_state", s.psychological_state}};
    return j.dump();
}

}  // namespace esckit
