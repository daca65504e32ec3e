#include "esckit/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ask.hpp"
#include "esckit/error.hpp"
#include "esckit/prompts.hpp"
#include "esckit/text.hpp"

namespace esckit {

using ojson = nlohmann::ordered_json;

std::string_view to_string(Speaker speaker) { return speaker == Speaker::system ? "system" : "user"; }

std::string_view to_string(ReviewOutcome outcome) {
    switch (outcome) {
        case ReviewOutcome::accepted: return "accepted";
        case ReviewOutcome::discarded: return "discarded";
        case ReviewOutcome::exhausted: return "exhausted";
    }
    return "?";
}

std::string_view to_string(SeverityLevel level) {
    switch (level) {
        case SeverityLevel::recovered: return "recovered";
        case SeverityLevel::minimal: return "minimal";
        case SeverityLevel::mild: return "mild";
        case SeverityLevel::moderate: return "moderate";
        case SeverityLevel::severe: return "severe";
    }
    return "?";
}

std::optional<SeverityLevel> severity_from_string(std::string_view name) {
    const auto n = text::normalize_label(name);
    for (int v = 0; v <= 4; ++v) {
        const auto level = static_cast<SeverityLevel>(v);
        if (n == to_string(level)) return level;
    }
    return std::nullopt;
}

std::string_view to_string(DialogueSource source) { return source == DialogueSource::seed ? "seed" : "generated"; }

std::size_t Dialogue::count(Speaker speaker) const {
    return static_cast<std::size_t>(
        std::count_if(utterances.begin(), utterances.end(), [&](const Utterance& u) { return u.speaker == speaker; }));
}

// --- Validation -----------------------------------------------------------------

namespace {

[[noreturn]] void violation(std::string_view owner, const std::string& rule) {
    throw Error(ErrorCode::InvariantViolation, std::string(owner) + ": " + rule);
}

void check_list(const std::vector<std::string>& ids, Section section, const LabelSet& taxonomy,
                std::string_view owner) {
    const std::string name(to_string(section));
    if (ids.empty() || ids.size() > 3) violation(owner, name + " must hold 1..3 ids");
    std::set<std::string> seen;
    for (const auto& id : ids) {
        if (!seen.insert(id).second) violation(owner, name + " has duplicate id " + id);
        if (!taxonomy.contains(section, id)) violation(owner, name + " id " + id + " does not resolve");
    }
}

std::string label_names(const std::vector<std::string>& ids, Section section, const LabelSet& taxonomy) {
    std::vector<std::string> names;
    for (const auto& id : ids) {
        const auto* l = taxonomy.find_label(section, id);
        names.push_back(l ? l->name : id);
    }
    return text::join(names, ", ");
}

}  // namespace

void validate_situation(const Situation& s, const LabelSet& taxonomy, std::string_view owner) {
    if (!taxonomy.contains(Section::groups, s.group_id)) violation(owner, "group id " + s.group_id + " does not resolve");
    check_list(s.problem_ids, Section::problems, taxonomy, owner);
    check_list(s.cause_ids, Section::causes, taxonomy, owner);
    check_list(s.focus_ids, Section::focuses, taxonomy, owner);
}

std::string render_situation(const Situation& s, const LabelSet& taxonomy) {
    const auto* group = taxonomy.find_label(Section::groups, s.group_id);
    std::string out;
    out += "Group: " + (group ? group->name : s.group_id) + "\n";
    out += "Problems: " + label_names(s.problem_ids, Section::problems, taxonomy) + "\n";
    out += "Causes: " + label_names(s.cause_ids, Section::causes, taxonomy) + "\n";
    out += "Support focuses: " + label_names(s.focus_ids, Section::focuses, taxonomy);
    return out;
}

std::vector<std::string> realized_path(const Dialogue& d) {
    std::vector<std::string> out;
    for (std::size_t i = 1; i < d.utterances.size(); ++i) {
        const auto& u = d.utterances[i];
        if (u.speaker == Speaker::system) out.push_back(u.strategy_id.value_or(""));
    }
    return out;
}

void validate_dialogue(const Dialogue& d, const LabelSet& taxonomy) {
    const std::string owner = d.id.empty() ? std::string("<no id>") : d.id;
    if (d.id.empty()) violation(owner, "id is empty");
    if (d.utterances.empty()) violation(owner, "no utterances");
    if (d.utterances.front().speaker != Speaker::system) violation(owner, "first utterance must be the system greeting");
    for (std::size_t i = 0; i < d.utterances.size(); ++i) {
        const auto& u = d.utterances[i];
        if (i > 0 && u.speaker == d.utterances[i - 1].speaker)
            violation(owner, "alternation broken at utterance " + std::to_string(i));
        if (text::trim(u.text).empty()) violation(owner, "empty text at utterance " + std::to_string(i));
        if (u.strategy_id) {
            if (u.speaker != Speaker::system) violation(owner, "strategy on user utterance " + std::to_string(i));
            if (!taxonomy.find_strategy(*u.strategy_id))
                violation(owner, "unknown strategy " + *u.strategy_id + " at utterance " + std::to_string(i));
        } else if (u.speaker == Speaker::system && i > 0) {
            violation(owner, "system utterance " + std::to_string(i) + " has no strategy");
        }
    }
    if (d.path.steps.empty()) violation(owner, "path is empty");
    for (const auto& step : d.path.steps)
        if (!taxonomy.find_strategy(step)) violation(owner, "path step " + step + " does not resolve");
    if (realized_path(d) != d.path.steps) violation(owner, "path/realization mismatch");
    validate_situation(d.situation, taxonomy, owner);
    if (d.review) {
        for (const auto& r : d.review->rounds)
            if (r.score < 1 || r.score > 10) violation(owner, "review score out of 1..10");
        if (d.review->final == ReviewOutcome::accepted && (d.review->rounds.empty() || d.review->rounds.back().score < 9))
            violation(owner, "accepted review must end with a score >= 9");
    }
    if (d.source == DialogueSource::generated && d.review && d.review->final == ReviewOutcome::accepted &&
        d.utterances.size() < kMinAcceptedUtterances)
        violation(owner, "accepted generated dialogue has fewer than 10 utterances");
}

// --- Serialization --------------------------------------------------------------

std::string dialogue_to_json(const Dialogue& d) {
    ojson j;
    j["id"] = d.id;
    j["source"] = to_string(d.source);
    j["situation"] = {{"group", d.situation.group_id},
                      {"problems", d.situation.problem_ids},
                      {"causes", d.situation.cause_ids},
                      {"focuses", d.situation.focus_ids}};
    j["path"] = d.path.steps;
    ojson utts = ojson::array();
    for (const auto& u : d.utterances) {
        ojson ju = {{"speaker", to_string(u.speaker)}, {"text", u.text}};
        if (u.strategy_id) ju["strategy"] = *u.strategy_id;
        utts.push_back(std::move(ju));
    }
    j["utterances"] = std::move(utts);
    if (d.review) {
        ojson rounds = ojson::array();
        for (const auto& r : d.review->rounds) rounds.push_back({{"score", r.score}, {"feedback", r.feedback}});
        j["review"] = {{"rounds", rounds}, {"final", to_string(d.review->final)}};
        if (!d.review->reason.empty()) j["review"]["reason"] = d.review->reason;
    }
    if (d.severity) j["severity"] = {{"before", to_string(d.severity->before)}, {"after", to_string(d.severity->after)}};
    return j.dump();
}

namespace {

[[noreturn]] void schema(const std::string& field) { throw Error(ErrorCode::SchemaError, field); }

const ojson& need(const ojson& j, const char* key, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) schema(path + key);
    return *it;
}

std::string need_string(const ojson& j, const char* key, const std::string& path) {
    const auto& v = need(j, key, path);
    if (!v.is_string()) schema(path + key);
    return v.get<std::string>();
}

std::vector<std::string> need_strings(const ojson& j, const char* key, const std::string& path) {
    const auto& v = need(j, key, path);
    if (!v.is_array()) schema(path + key);
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (!e.is_string()) schema(path + key);
        out.push_back(e.get<std::string>());
    }
    return out;
}

}  // namespace

Dialogue dialogue_from_json(std::string_view line) {
    ojson j;
    try {
        j = ojson::parse(line.begin(), line.end());
    } catch (const ojson::parse_error& e) {
        throw Error(ErrorCode::SchemaError, std::string("record is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) schema("<record>");
    Dialogue d;
    d.id = need_string(j, "id", "");
    const auto source = need_string(j, "source", "");
    if (source == "seed") {
        d.source = DialogueSource::seed;
    } else if (source == "generated") {
        d.source = DialogueSource::generated;
    } else {
        schema("source");
    }
    const auto& sit = need(j, "situation", "");
    if (!sit.is_object()) schema("situation");
    d.situation.group_id = need_string(sit, "group", "situation.");
    d.situation.problem_ids = need_strings(sit, "problems", "situation.");
    d.situation.cause_ids = need_strings(sit, "causes", "situation.");
    d.situation.focus_ids = need_strings(sit, "focuses", "situation.");
    d.path.steps = need_strings(j, "path", "");
    const auto& utts = need(j, "utterances", "");
    if (!utts.is_array()) schema("utterances");
    for (std::size_t i = 0; i < utts.size(); ++i) {
        const std::string p = "utterances[" + std::to_string(i) + "].";
        if (!utts[i].is_object()) schema(p.substr(0, p.size() - 1));
        Utterance u;
        const auto speaker = need_string(utts[i], "speaker", p);
        if (speaker == "system") {
            u.speaker = Speaker::system;
        } else if (speaker == "user") {
            u.speaker = Speaker::user;
        } else {
            schema(p + "speaker");
        }
        u.text = need_string(utts[i], "text", p);
        if (auto it = utts[i].find("strategy"); it != utts[i].end() && !it->is_null()) {
            if (!it->is_string()) schema(p + "strategy");
            u.strategy_id = it->get<std::string>();
        }
        d.utterances.push_back(std::move(u));
    }
    if (auto it = j.find("review"); it != j.end() && !it->is_null()) {
        ReviewRecord r;
        const auto& rounds = need(*it, "rounds", "review.");
        if (!rounds.is_array()) schema("review.rounds");
        for (const auto& jr : rounds) {
            const auto& score = need(jr, "score", "review.rounds[].");
            if (!score.is_number_integer()) schema("review.rounds[].score");
            r.rounds.push_back({score.get<int>(), jr.value("feedback", std::string{})});
        }
        const auto final = need_string(*it, "final", "review.");
        if (final == "accepted") {
            r.final = ReviewOutcome::accepted;
        } else if (final == "discarded") {
            r.final = ReviewOutcome::discarded;
        } else if (final == "exhausted") {
            r.final = ReviewOutcome::exhausted;
        } else {
            schema("review.final");
        }
        r.reason = it->value("reason", std::string{});
        d.review = std::move(r);
    }
    if (auto it = j.find("severity"); it != j.end() && !it->is_null()) {
        auto before = severity_from_string(need_string(*it, "before", "severity."));
        auto after = severity_from_string(need_string(*it, "after", "severity."));
        if (!before) schema("severity.before");
        if (!after) schema("severity.after");
        d.severity = SeverityPair{*before, *after};
    }
    return d;
}

std::vector<Dialogue> parse_corpus(std::string_view contents, const LabelSet& taxonomy) {
    std::vector<Dialogue> out;
    std::set<std::string> ids;
    long line_no = 0;
    for (const auto& line : text::split_lines(contents)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        Dialogue d;
        try {
            d = dialogue_from_json(line);
        } catch (const Error& e) {
            throw Error(e.code(), e.detail(), line_no);
        }
        validate_dialogue(d, taxonomy);
        if (!ids.insert(d.id).second) throw Error(ErrorCode::InvariantViolation, d.id + ": duplicate dialogue id", line_no);
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<Dialogue> read_corpus(const std::filesystem::path& path, const LabelSet& taxonomy) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_corpus(buf.str(), taxonomy);
}

std::string serialize_corpus(const std::vector<Dialogue>& dialogues, const LabelSet& taxonomy) {
    std::string out;
    for (const auto& d : dialogues) {
        validate_dialogue(d, taxonomy);
        out += dialogue_to_json(d);
        out += '\n';
    }
    return out;
}

void write_corpus(const std::vector<Dialogue>& dialogues, const std::filesystem::path& path, const LabelSet& taxonomy) {
    const auto data = serialize_corpus(dialogues, taxonomy);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << data;
    if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

// --- Statistics -----------------------------------------------------------------

CorpusStats compute_stats(const std::vector<Dialogue>& dialogues, TokenMode mode, const LabelSet* taxonomy) {
    if (dialogues.empty()) throw Error(ErrorCode::EmptyCorpus, "compute_stats needs at least one dialogue");
    CorpusStats s;
    s.token_mode = mode;
    s.n_dialogues = dialogues.size();
    for (const auto& d : dialogues) {
        for (const auto& u : d.utterances) {
            const auto n = tokenize(u.text, mode).size();
            if (u.speaker == Speaker::system) {
                ++s.utterances.system;
                s.tokens.system += n;
            } else {
                ++s.utterances.user;
                s.tokens.user += n;
            }
        }
    }
    s.utterances.total = s.utterances.system + s.utterances.user;
    s.tokens.total = s.tokens.system + s.tokens.user;
    s.avg_dialogue_len_total = {s.utterances.total, s.n_dialogues};
    s.avg_dialogue_len_system = {s.utterances.system, s.n_dialogues};
    s.avg_dialogue_len_user = {s.utterances.user, s.n_dialogues};
    s.avg_utterance_len_total = {s.tokens.total, s.utterances.total};
    s.avg_utterance_len_system = {s.tokens.system, s.utterances.system};
    s.avg_utterance_len_user = {s.tokens.user, s.utterances.user};
    if (taxonomy) {
        s.n_strategies = taxonomy->strategies.size();
        s.language = taxonomy->language;
    }
    return s;
}

std::string humanize_count(std::uint64_t n) {
    char buf[32];
    if (n < 1000) {
        std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(n));
    } else if (n < 1000000) {
        std::snprintf(buf, sizeof buf, "%.1fK", static_cast<double>(n) / 1e3);
    } else {
        std::snprintf(buf, sizeof buf, "%.1fM", static_cast<double>(n) / 1e6);
    }
    return buf;
}

namespace {

std::string two(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string lang_code(const std::string& language) {
    std::string out;
    for (char c : language) out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return out.empty() ? "-" : out;
}

}  // namespace

std::string render_stats_table(const std::string& name, const CorpusStats& s) {
    const std::vector<std::string> header = {"Datasets", "Size", "Utts. (System/User)", "#Dia.len (System/User)",
                                             "#Utt.len (System/User)", "St.s", "Lan."};
    const std::vector<std::string> row = {
        name,
        humanize_count(s.n_dialogues),
        humanize_count(s.utterances.total) + " (" + humanize_count(s.utterances.system) + "/" +
            humanize_count(s.utterances.user) + ")",
        two(s.avg_dialogue_len_total.value()) + " (" + two(s.avg_dialogue_len_system.value()) + "/" +
            two(s.avg_dialogue_len_user.value()) + ")",
        two(s.avg_utterance_len_total.value()) + " (" + two(s.avg_utterance_len_system.value()) + "/" +
            two(s.avg_utterance_len_user.value()) + ")",
        s.n_strategies ? std::to_string(s.n_strategies) : "-",
        lang_code(s.language),
    };
    std::string out;
    for (const auto* line : {&header, &row}) {
        for (std::size_t c = 0; c < line->size(); ++c) {
            const auto width = std::max(header[c].size(), row[c].size());
            if (c) out += " | ";
            out += (*line)[c] + std::string(width - (*line)[c].size(), ' ');
        }
        out = text::trim_trailing(out) + "\n";
    }
    return out;
}

std::string stats_json(const CorpusStats& s) {
    auto ratio = [](const Ratio& r) { return ojson{{"num", r.num}, {"den", r.den}, {"value", r.value()}}; };
    ojson j;
    j["size"] = s.n_dialogues;
    j["utterances"] = {{"total", s.utterances.total}, {"system", s.utterances.system}, {"user", s.utterances.user}};
    j["tokens"] = {{"total", s.tokens.total}, {"system", s.tokens.system}, {"user", s.tokens.user}};
    j["avg_dialogue_len"] = {{"total", ratio(s.avg_dialogue_len_total)},
                             {"system", ratio(s.avg_dialogue_len_system)},
                             {"user", ratio(s.avg_dialogue_len_user)}};
    j["avg_utterance_len"] = {{"total", ratio(s.avg_utterance_len_total)},
                              {"system", ratio(s.avg_utterance_len_system)},
                              {"user", ratio(s.avg_utterance_len_user)}};
    j["strategies"] = s.n_strategies;
    j["language"] = s.language;
    j["token_unit"] = {{"mode", to_string(s.token_mode)},
                       {"note", "CJK characters count one token each; Latin text is split on whitespace and punctuation"}};
    return j.dump(2);
}

// --- Severity -------------------------------------------------------------------

std::optional<SeverityLevel> parse_severity(std::string_view reply) {
    std::string lower = text::to_lower_ascii(reply);
    if (auto pos = lower.find("severity"); pos != std::string::npos) lower = lower.substr(pos + 8);

    static const std::pair<std::string_view, SeverityLevel> kWords[] = {
        {"severe", SeverityLevel::severe},       {"moderate", SeverityLevel::moderate},
        {"mild", SeverityLevel::mild},           {"minimal", SeverityLevel::minimal},
        {"recovered", SeverityLevel::recovered}, {"重度", SeverityLevel::severe},
        {"严重", SeverityLevel::severe},         {"中度", SeverityLevel::moderate},
        {"轻度", SeverityLevel::mild},           {"轻微", SeverityLevel::minimal},
        {"康复", SeverityLevel::recovered},      {"痊愈", SeverityLevel::recovered},
    };
    auto is_word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
    std::optional<SeverityLevel> best;
    std::size_t best_pos = std::string::npos;
    for (const auto& [word, level] : kWords) {
        std::size_t from = 0;
        while (true) {
            const auto pos = lower.find(word, from);
            if (pos == std::string::npos) break;
            const bool ascii = static_cast<unsigned char>(word[0]) < 0x80;
            const bool left_ok = !ascii || pos == 0 || !is_word_char(lower[pos - 1]);
            const bool right_ok = !ascii || pos + word.size() >= lower.size() || !is_word_char(lower[pos + word.size()]);
            if (left_ok && right_ok) {
                if (pos < best_pos) {
                    best_pos = pos;
                    best = level;
                }
                break;
            }
            from = pos + 1;
        }
    }
    return best;
}

SeverityPair judge_severity(const Dialogue& dialogue, Backend& judger, const SeverityOptions& options) {
    std::vector<std::string> user_texts;
    for (const auto& u : dialogue.utterances)
        if (u.speaker == Speaker::user) user_texts.push_back(u.text);
    if (user_texts.size() < 4)
        throw Error(ErrorCode::InsufficientTurns,
                    dialogue.id + " has " + std::to_string(user_texts.size()) + " user turns, 4 needed");

    const auto& prompts = PromptLibrary::builtin();
    const detail::ReplyParser<SeverityLevel> parser = [](const std::string& reply, std::string& problem) {
        auto level = parse_severity(reply);
        if (!level) problem = "no severity level found";
        return level;
    };
    const std::string expected = "Reply with \"Severity: <level>\" using one of: severe, moderate, mild, minimal, recovered.";

    auto ask = [&](const std::string& phase, const std::string& utterances, const std::string& tag) {
        auto p = prompts.render("judger", {{"phase", phase}, {"utterances", utterances}});
        auto req = make_request(RoleTag::judger, p.system, p.user, dialogue.id + "/severity/" + tag);
        return detail::ask_with_reasks<SeverityLevel>(judger, std::move(req), options.max_reasks, parser,
                                                      ErrorCode::UnparseableJudgment, expected, prompts);
    };

    std::string first_three;
    for (std::size_t i = 0; i < 3; ++i) first_three += "- " + user_texts[i] + (i < 2 ? "\n" : "");
    SeverityPair out;
    out.before = ask("start of the conversation", first_three, "before");
    out.after = ask("end of the conversation", "- " + user_texts.back(), "after");
    return out;
}

std::map<int, std::size_t> relief_histogram(const std::vector<Dialogue>& dialogues) {
    std::map<int, std::size_t> hist;
    for (const auto& d : dialogues) {
        if (!d.severity) throw Error(ErrorCode::MissingSeverity, d.id);
        ++hist[d.severity->relief()];
    }
    return hist;
}

double fraction_relieved(const std::map<int, std::size_t>& histogram, int levels) {
    std::size_t total = 0;
    std::size_t hit = 0;
    for (const auto& [relief, count] : histogram) {
        total += count;
        if (relief >= levels) hit += count;
    }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace esckit
