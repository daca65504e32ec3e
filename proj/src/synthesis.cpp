#include "esckit/synthesis.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ask.hpp"
#include "esckit/error.hpp"
#include "esckit/text.hpp"

namespace esckit {

using ojson = nlohmann::ordered_json;

namespace {

std::string language_name(const LabelSet& taxonomy) {
    if (taxonomy.language == "zh") return "Chinese";
    if (taxonomy.language == "en") return "English";
    return taxonomy.language.empty() ? "English" : taxonomy.language;
}

std::string strategy_menu(const LabelSet& taxonomy) {
    std::string out;
    for (const auto& s : taxonomy.strategies) {
        out += "- " + s.name;
        if (!s.description.empty()) out += ": " + s.description;
        out += '\n';
    }
    return out;
}

std::vector<std::string> sample_labels(std::mt19937_64& rng, const std::vector<LabelDef>& labels) {
    const std::size_t cap = std::min<std::size_t>(3, labels.size());
    std::uniform_int_distribution<std::size_t> count_dist(1, cap);
    const std::size_t k = count_dist(rng);
    // Partial Fisher-Yates over indices.
    std::vector<std::size_t> idx(labels.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(labels[i].id);
    return out;
}

std::size_t count_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::size_t n = 0;
    for (const auto& x : a)
        if (std::find(b.begin(), b.end(), x) != b.end()) ++n;
    return n;
}

// Finds `key` case-insensitively (ASCII) and returns the offset just past it.
std::optional<std::size_t> find_icase(std::string_view hay, std::string_view key) {
    const auto lower = text::to_lower_ascii(hay);
    const auto pos = lower.find(text::to_lower_ascii(key));
    if (pos == std::string::npos) return std::nullopt;
    return pos + key.size();
}

std::string_view skip_label_punct(std::string_view s) {
    while (!s.empty()) {
        if (s.front() == ':' || s.front() == '=' || s.front() == '*' || s.front() == ' ' || s.front() == '\t') {
            s.remove_prefix(1);
        } else if (s.substr(0, 3) == "\xEF\xBC\x9A") {  // full-width colon
            s.remove_prefix(3);
        } else {
            break;
        }
    }
    return s;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

std::string flatten(std::string_view s) {
    std::string out;
    for (char c : s) out.push_back(c == '\n' || c == '\r' ? ' ' : c);
    return std::string(text::trim(out));
}

}  // namespace

// --- Sampling -----------------------------------------------------------------------------

std::uint64_t situation_seed(std::uint64_t run_seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(run_seed), static_cast<std::uint32_t>(run_seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 rng(seq);
    return rng();
}

Situation sample_situation(std::mt19937_64& rng, const LabelSet& taxonomy) {
    if (taxonomy.groups.empty()) throw Error(ErrorCode::EmptyList, "groups");
    Situation s;
    std::uniform_int_distribution<std::size_t> group(0, taxonomy.groups.size() - 1);
    s.group_id = taxonomy.groups[group(rng)].id;
    s.problem_ids = sample_labels(rng, taxonomy.problems);
    s.cause_ids = sample_labels(rng, taxonomy.causes);
    s.focus_ids = sample_labels(rng, taxonomy.focuses);
    return s;
}

Situation sample_situation(std::uint64_t seed, const LabelSet& taxonomy) {
    std::mt19937_64 rng(seed);
    return sample_situation(rng, taxonomy);
}

std::vector<std::size_t> select_seeding_situations(const std::vector<Situation>& pool, const LabelSet& taxonomy,
                                                   std::size_t per_group) {
    std::vector<std::size_t> out;
    for (const auto& g : taxonomy.groups) {
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < pool.size(); ++i)
            if (pool[i].group_id == g.id) candidates.push_back(i);
        std::set<std::string> seen;
        std::vector<bool> taken(candidates.size(), false);
        for (std::size_t picked = 0; picked < per_group && picked < candidates.size(); ++picked) {
            std::size_t best = candidates.size();
            std::size_t best_gain = 0;
            for (std::size_t c = 0; c < candidates.size(); ++c) {
                if (taken[c]) continue;
                const auto& s = pool[candidates[c]];
                std::size_t gain = 0;
                for (const auto* list : {&s.problem_ids, &s.cause_ids, &s.focus_ids})
                    for (const auto& id : *list) gain += seen.count(id) ? 0 : 1;
                if (best == candidates.size() || gain > best_gain) {
                    best = c;
                    best_gain = gain;
                }
            }
            taken[best] = true;
            const auto& s = pool[candidates[best]];
            for (const auto* list : {&s.problem_ids, &s.cause_ids, &s.focus_ids}) seen.insert(list->begin(), list->end());
            out.push_back(candidates[best]);
        }
    }
    return out;
}

// --- Plausibility -----------------------------------------------------------------------------

std::optional<PlausibilityVerdict> parse_verdict(std::string_view reply) {
    const auto lines = text::split_lines(reply);
    std::size_t first = 0;
    while (first < lines.size() && text::trim(lines[first]).empty()) ++first;
    if (first == lines.size()) return std::nullopt;

    std::string head = text::to_lower_ascii(text::trim(lines[first]));
    head.erase(std::remove(head.begin(), head.end(), '*'), head.end());
    for (std::string_view prefix : {"verdict", "answer", "plausible"}) {
        if (head.rfind(prefix, 0) == 0) {
            head = std::string(skip_label_punct(std::string_view(head).substr(prefix.size())));
            break;
        }
    }
    PlausibilityVerdict v;
    auto word_at_start = [&](std::string_view w) {
        if (head.rfind(w, 0) != 0) return false;
        return head.size() == w.size() || !std::isalpha(static_cast<unsigned char>(head[w.size()]));
    };
    if (word_at_start("yes")) {
        v.plausible = true;
    } else if (word_at_start("no")) {
        v.plausible = false;
    } else if (head.rfind("不合理", 0) == 0 || head.rfind("否", 0) == 0 || head.rfind("不", 0) == 0) {
        v.plausible = false;
    } else if (head.rfind("合理", 0) == 0 || head.rfind("是", 0) == 0) {
        v.plausible = true;
    } else {
        return std::nullopt;
    }

    if (auto at = find_icase(reply, "rationale")) {
        v.rationale = std::string(text::trim(skip_label_punct(reply.substr(*at))));
    } else {
        std::vector<std::string> rest(lines.begin() + static_cast<std::ptrdiff_t>(first) + 1, lines.end());
        v.rationale = std::string(text::trim(text::join(rest, "\n")));
    }
    return v;
}

std::vector<PlausibilityVerdict> judge_situation(const Situation& situation, const std::vector<BackendPtr>& judges,
                                                 const LabelSet& taxonomy, const PlausibilityOptions& options,
                                                 const std::string& request_prefix, const PromptLibrary& prompts) {
    if (judges.empty()) throw Error(ErrorCode::InvalidArgument, "at least one plausibility judge is required");
    const auto prompt = prompts.render("plausibility", {{"situation", render_situation(situation, taxonomy)}});
    std::vector<PlausibilityVerdict> out;
    for (std::size_t k = 0; k < judges.size(); ++k) {
        auto request = make_request(RoleTag::plausibility_judge, prompt.system, prompt.user,
                                    request_prefix + "/j" + std::to_string(k));
        detail::ReplyParser<PlausibilityVerdict> parser = [](const std::string& reply, std::string& problem) {
            auto v = parse_verdict(reply);
            if (!v) problem = "the first line must be exactly \"yes\" or \"no\"";
            return v;
        };
        PlausibilityVerdict verdict;
        try {
            verdict = detail::ask_with_reasks(*judges[k], std::move(request), options.max_reasks, parser,
                                              ErrorCode::UnparseableVerdict, "yes|no + Rationale: <text>", prompts);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::UnparseableVerdict) throw;
            verdict.plausible = false;
            verdict.rationale = "unparseable verdict: " + e.detail();
        }
        verdict.judge_name = judges[k]->name();
        out.push_back(std::move(verdict));
    }
    return out;
}

bool verdicts_accept(const std::vector<PlausibilityVerdict>& verdicts, PlausibilityRule rule) {
    if (verdicts.empty()) return false;
    const auto yes = static_cast<std::size_t>(
        std::count_if(verdicts.begin(), verdicts.end(), [](const auto& v) { return v.plausible; }));
    return rule == PlausibilityRule::unanimous ? yes == verdicts.size() : 2 * yes > verdicts.size();
}

PlausibilityResult filter_plausible(const std::vector<Situation>& situations, const std::vector<BackendPtr>& judges,
                                    const LabelSet& taxonomy, const PlausibilityOptions& options,
                                    const PromptLibrary& prompts) {
    if (judges.empty()) throw Error(ErrorCode::InvalidArgument, "at least one plausibility judge is required");
    PlausibilityResult result;
    for (std::size_t i = 0; i < situations.size(); ++i) {
        JudgedSituation js{i, situations[i],
                           judge_situation(situations[i], judges, taxonomy, options,
                                           situation_id(i) + "/plausibility", prompts)};
        (verdicts_accept(js.verdicts, options.rule) ? result.kept : result.rejected).push_back(std::move(js));
    }
    return result;
}

// --- Demonstration ------------------------------------------------------------------------------

int situation_overlap(const Situation& a, const Situation& b) {
    return static_cast<int>(count_overlap(a.problem_ids, b.problem_ids) + count_overlap(a.cause_ids, b.cause_ids) +
                            count_overlap(a.focus_ids, b.focus_ids));
}

const Dialogue& retrieve_demonstration(const Situation& situation, const std::vector<Dialogue>& seeds) {
    if (seeds.empty()) throw Error(ErrorCode::EmptySeedCorpus, "no seed dialogues to retrieve from");
    auto pick = [&](bool same_group_only) -> const Dialogue* {
        const Dialogue* best = nullptr;
        int best_score = -1;
        for (const auto& d : seeds) {
            if (same_group_only && d.situation.group_id != situation.group_id) continue;
            const int score = situation_overlap(situation, d.situation);
            if (!best || score > best_score || (score == best_score && d.id < best->id)) {
                best = &d;
                best_score = score;
            }
        }
        return best;
    };
    if (const auto* d = pick(true)) return *d;
    return *pick(false);
}

// --- Path ---------------------------------------------------------------------------------------

std::optional<DialoguePath> parse_path(std::string_view reply, const LabelSet& taxonomy, std::string& unresolved) {
    std::string s(reply);
    for (std::string_view sep : {"->", "\xE2\x86\x92", "\xE3\x80\x81", "\xEF\xBC\x8C", "\xEF\xBC\x9B", ";", "|", "\n"})
        s = replace_all(std::move(s), sep, ",");

    DialoguePath path;
    std::size_t start = 0;
    while (start <= s.size()) {
        auto end = s.find(',', start);
        if (end == std::string::npos) end = s.size();
        std::string_view item = text::trim(std::string_view(s).substr(start, end - start));
        start = end + 1;

        // A leading "Path:" style label.
        for (std::string_view colon : {":", "\xEF\xBC\x9A"}) {
            const auto c = item.rfind(colon);
            if (c != std::string_view::npos) item = text::trim(item.substr(c + colon.size()));
        }
        // Bullets and numbering such as "1.", "2)", "- ", "* ".
        while (!item.empty() && (item.front() == '-' || item.front() == '*' || item.front() == '#'))
            item = text::trim(item.substr(1));
        std::size_t digits = 0;
        while (digits < item.size() && std::isdigit(static_cast<unsigned char>(item[digits]))) ++digits;
        if (digits > 0 && digits < item.size() && (item[digits] == '.' || item[digits] == ')'))
            item = text::trim(item.substr(digits + 1));
        while (!item.empty() && std::string_view("\"'[]().`").find(item.back()) != std::string_view::npos)
            item = text::trim(item.substr(0, item.size() - 1));
        while (!item.empty() && std::string_view("\"'[](`").find(item.front()) != std::string_view::npos)
            item = text::trim(item.substr(1));
        if (item.empty()) continue;

        const auto* strategy = strategy_by_name(taxonomy, item);
        if (!strategy) {
            unresolved = std::string(item);
            return std::nullopt;
        }
        path.steps.push_back(strategy->id);
    }
    return path;
}

DialoguePath generate_path(const Situation& situation, Backend& backend, const LabelSet& taxonomy,
                           const PathOptions& options, const std::string& request_id, const PromptLibrary& prompts) {
    const auto prompt = prompts.render("path", {{"situation", render_situation(situation, taxonomy)},
                                                {"strategies", strategy_menu(taxonomy)},
                                                {"min_steps", std::to_string(options.min_steps)},
                                                {"max_steps", std::to_string(options.max_steps)}});
    bool last_was_length = false;
    std::string last_unresolved;
    detail::ReplyParser<DialoguePath> parser = [&](const std::string& reply, std::string& problem) {
        std::string unresolved;
        auto path = parse_path(reply, taxonomy, unresolved);
        if (!path) {
            last_was_length = false;
            last_unresolved = unresolved;
            problem = "\"" + unresolved + "\" is not one of the available strategies";
            return std::optional<DialoguePath>{};
        }
        if (path->steps.size() < options.min_steps || path->steps.size() > options.max_steps) {
            last_was_length = true;
            problem = "the path has " + std::to_string(path->steps.size()) + " steps";
            return std::optional<DialoguePath>{};
        }
        return path;
    };
    try {
        return detail::ask_with_reasks(backend, make_request(RoleTag::generator, prompt.system, prompt.user, request_id),
                                       options.max_reasks, parser, ErrorCode::UnresolvableStrategy,
                                       "between " + std::to_string(options.min_steps) + " and " +
                                           std::to_string(options.max_steps) +
                                           " strategy names from the list, separated by commas",
                                       prompts);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::UnresolvableStrategy) throw;
        if (last_was_length) throw Error(ErrorCode::PathLengthOutOfBounds, e.detail());
        throw Error(ErrorCode::UnresolvableStrategy, last_unresolved);
    }
}

// --- Transcripts and CoT prompt ----------------------------------------------------------------------

std::string render_transcript(const std::vector<Utterance>& utterances, const LabelSet& taxonomy) {
    std::string out;
    for (const auto& u : utterances) {
        if (u.speaker == Speaker::user) {
            out += "User: ";
        } else if (u.strategy_id) {
            const auto* s = taxonomy.find_strategy(*u.strategy_id);
            out += "System [" + (s ? s->name : *u.strategy_id) + "]: ";
        } else {
            out += "System: ";
        }
        out += flatten(u.text);
        out += '\n';
    }
    return out;
}

namespace {

struct SpeakerLine {
    Speaker speaker;
    std::optional<std::string> tag;
    std::string text;
};

std::optional<SpeakerLine> match_speaker_line(std::string_view line) {
    line = text::trim(line);
    while (!line.empty() && line.front() == '*') line.remove_prefix(1);
    struct Prefix {
        std::string_view word;
        Speaker speaker;
    };
    static const Prefix prefixes[] = {{"system", Speaker::system}, {"user", Speaker::user},
                                      {"系统", Speaker::system}, {"用户", Speaker::user}};
    for (const auto& p : prefixes) {
        if (!text::starts_with_icase(line, p.word)) continue;
        std::string_view rest = line.substr(p.word.size());
        while (!rest.empty() && rest.front() == '*') rest.remove_prefix(1);
        rest = text::trim(rest);
        SpeakerLine out{p.speaker, std::nullopt, {}};
        std::string_view close;
        if (!rest.empty() && rest.front() == '[') {
            close = "]";
            rest.remove_prefix(1);
        } else if (rest.substr(0, 3) == "\xE3\x80\x90") {  // 【
            close = "\xE3\x80\x91";
            rest.remove_prefix(3);
        }
        if (!close.empty()) {
            const auto end = rest.find(close);
            if (end == std::string_view::npos) return std::nullopt;
            out.tag = std::string(text::trim(rest.substr(0, end)));
            rest = text::trim(rest.substr(end + close.size()));
        }
        while (!rest.empty() && rest.front() == '*') rest.remove_prefix(1);
        if (!rest.empty() && rest.front() == ':') {
            rest.remove_prefix(1);
        } else if (rest.substr(0, 3) == "\xEF\xBC\x9A") {
            rest.remove_prefix(3);
        } else {
            return std::nullopt;
        }
        while (!rest.empty() && rest.front() == '*') rest.remove_prefix(1);
        out.text = std::string(text::trim(rest));
        return out;
    }
    return std::nullopt;
}

}  // namespace

std::vector<Utterance> parse_transcript(std::string_view transcript, const LabelSet& taxonomy) {
    std::vector<Utterance> out;
    std::size_t line_no = 0;
    for (const auto& raw : text::split_lines(transcript)) {
        ++line_no;
        const auto line = text::trim(raw);
        if (line.empty()) continue;
        auto m = match_speaker_line(line);
        if (!m) {
            if (!out.empty()) out.back().text += " " + std::string(line);
            continue;
        }
        if (out.empty() && m->speaker != Speaker::system)
            throw Error(ErrorCode::MalformedTranscript, "the first turn must be the counselor's", static_cast<long>(line_no));
        if (!out.empty() && out.back().speaker == m->speaker)
            throw Error(ErrorCode::MalformedTranscript,
                        "two consecutive " + std::string(to_string(m->speaker)) + " turns",
                        static_cast<long>(line_no));
        Utterance u{m->speaker, std::move(m->text), std::nullopt};
        if (m->tag) {
            if (u.speaker == Speaker::user)
                throw Error(ErrorCode::MalformedTranscript, "strategy label on a user turn", static_cast<long>(line_no));
            const auto* s = strategy_by_name(taxonomy, *m->tag);
            if (!s)
                throw Error(ErrorCode::MalformedTranscript, "unknown strategy label " + *m->tag,
                            static_cast<long>(line_no));
            u.strategy_id = s->id;
        }
        out.push_back(std::move(u));
    }
    if (out.empty()) throw Error(ErrorCode::MalformedTranscript, "no speaker lines found");
    for (std::size_t i = 0; i < out.size(); ++i)
        if (text::trim(out[i].text).empty())
            throw Error(ErrorCode::MalformedTranscript, "empty text in turn " + std::to_string(i + 1));
    return out;
}

std::string CotPrompt::render() const {
    std::string out;
    out += "## Client profile\n" + situation + "\n\n";
    out += "## Demonstration\n" + demonstration + "\n\n";
    out += "## Dialogue path\n" + path + "\n\n";
    out += "## Task\n" + instructions + "\n";
    return out;
}

CotPrompt build_cot_prompt(const Situation& situation, const Dialogue& demonstration, const DialoguePath& path,
                           const LabelSet& taxonomy, const PromptLibrary& prompts) {
    if (path.steps.empty()) throw Error(ErrorCode::InvalidArgument, "empty dialogue path");
    CotPrompt p;
    p.situation = render_situation(situation, taxonomy);
    p.demonstration = "Client profile:\n" + render_situation(demonstration.situation, taxonomy) +
                      "\n\nConversation:\n" + std::string(text::trim(render_transcript(demonstration.utterances, taxonomy)));
    for (std::size_t i = 0; i < path.steps.size(); ++i) {
        const auto* s = taxonomy.find_strategy(path.steps[i]);
        if (!s) throw Error(ErrorCode::UnresolvableStrategy, path.steps[i]);
        if (i) p.path += '\n';
        p.path += std::to_string(i + 1) + ". " + s->name;
    }
    const auto rendered = prompts.render(
        "generator", {{"language_name", language_name(taxonomy)}, {"n_steps", std::to_string(path.steps.size())}});
    p.system = rendered.system;
    p.instructions = rendered.user;
    return p;
}

// --- Generate / modify / review ------------------------------------------------------------------------

Dialogue generate_dialogue(const CotPrompt& prompt, Backend& backend, const LabelSet& taxonomy,
                           const Situation& situation, const DialoguePath& path, const std::string& dialogue_id,
                           const std::string& request_id) {
    const auto response = backend.complete(make_request(RoleTag::generator, prompt.system, prompt.render(), request_id));
    Dialogue d;
    d.id = dialogue_id;
    d.situation = situation;
    d.path = path;
    d.source = DialogueSource::generated;
    d.utterances = parse_transcript(response.text, taxonomy);
    for (std::size_t i = 1; i < d.utterances.size(); ++i)
        if (d.utterances[i].speaker == Speaker::system && !d.utterances[i].strategy_id)
            throw Error(ErrorCode::MalformedTranscript, "counselor turn " + std::to_string(i + 1) + " has no strategy label");
    const auto got = realized_path(d);
    if (got != path.steps) {
        throw Error(ErrorCode::PathMismatch,
                    "expected [" + text::join(path.steps, ", ") + "], got [" + text::join(got, ", ") + "]");
    }
    return d;
}

Dialogue modify_dialogue(const Dialogue& draft, Backend& backend, const LabelSet& taxonomy,
                         const std::string& feedback, const std::string& request_id, const PromptLibrary& prompts) {
    const auto prompt = prompts.render("modifier", {{"situation", render_situation(draft.situation, taxonomy)},
                                                    {"dialogue", render_transcript(draft.utterances, taxonomy)},
                                                    {"feedback", feedback},
                                                    {"language_name", language_name(taxonomy)}});
    const auto response = backend.complete(make_request(RoleTag::modifier, prompt.system, prompt.user, request_id));
    auto turns = parse_transcript(response.text, taxonomy);
    if (turns.size() != draft.utterances.size())
        throw Error(ErrorCode::MalformedTranscript, "structure changed: " + std::to_string(draft.utterances.size()) +
                                                        " turns became " + std::to_string(turns.size()));
    Dialogue out = draft;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        const auto& before = draft.utterances[i];
        if (turns[i].speaker != before.speaker || (i > 0 && turns[i].strategy_id != before.strategy_id))
            throw Error(ErrorCode::MalformedTranscript, "structure changed at turn " + std::to_string(i + 1));
        out.utterances[i].text = std::move(turns[i].text);
    }
    return out;
}

std::optional<ReviewRound> parse_review(std::string_view reply) {
    std::optional<std::size_t> at;
    for (std::string_view key : {"score", "评分", "得分", "分数"})
        if ((at = find_icase(reply, key))) break;
    std::string_view rest = at ? skip_label_punct(reply.substr(*at)) : text::trim(reply);
    std::size_t digits = 0;
    while (digits < rest.size() && std::isdigit(static_cast<unsigned char>(rest[digits]))) ++digits;
    if (digits == 0 || digits > 2) return std::nullopt;
    // Reject decimals like "8.5".
    if (digits < rest.size() && rest[digits] == '.' && digits + 1 < rest.size() &&
        std::isdigit(static_cast<unsigned char>(rest[digits + 1])))
        return std::nullopt;
    ReviewRound r;
    r.score = std::stoi(std::string(rest.substr(0, digits)));
    if (r.score < 1 || r.score > 10) return std::nullopt;

    if (auto f = find_icase(reply, "feedback")) {
        r.feedback = std::string(text::trim(skip_label_punct(reply.substr(*f))));
    } else if (auto z = find_icase(reply, "反馈")) {
        r.feedback = std::string(text::trim(skip_label_punct(reply.substr(*z))));
    } else {
        const auto nl = rest.find('\n');
        if (nl != std::string_view::npos) r.feedback = std::string(text::trim(rest.substr(nl + 1)));
    }
    return r;
}

ReviewResult review_loop(const Dialogue& dialogue, Backend& reviewer, Backend& modifier, const LabelSet& taxonomy,
                         const ReviewOptions& options, const std::string& request_prefix, const PromptLibrary& prompts) {
    if (options.max_rounds < 1) throw Error(ErrorCode::InvalidArgument, "max_rounds must be >= 1");
    ReviewResult result{dialogue, {}, 0};
    detail::ReplyParser<ReviewRound> parser = [](const std::string& reply, std::string& problem) {
        auto r = parse_review(reply);
        if (!r) problem = "no integer score between 1 and 10 was found";
        return r;
    };
    for (int round = 1; round <= options.max_rounds; ++round) {
        const auto prompt =
            prompts.render("reviewer", {{"situation", render_situation(result.dialogue.situation, taxonomy)},
                                        {"dialogue", render_transcript(result.dialogue.utterances, taxonomy)}});
        ReviewRound scored;
        try {
            scored = detail::ask_with_reasks(
                reviewer,
                make_request(RoleTag::reviewer, prompt.system, prompt.user,
                             request_prefix + "/r" + std::to_string(round)),
                options.max_reasks, parser, ErrorCode::UnparseableScore, "Score: <1-10>\nFeedback: <text>", prompts);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::UnparseableScore) throw;
            result.record.final = ReviewOutcome::discarded;
            result.record.reason = "unparseable score: " + flatten(e.detail());
            break;
        }
        result.record.rounds.push_back(scored);
        if (scored.score >= options.accept_at) {
            result.record.final = ReviewOutcome::accepted;
            break;
        }
        if (scored.score <= options.discard_at) {
            result.record.final = ReviewOutcome::discarded;
            break;
        }
        if (round == options.max_rounds) {
            result.record.final = ReviewOutcome::exhausted;
            break;
        }
        ++result.modifier_calls;
        try {
            result.dialogue = modify_dialogue(result.dialogue, modifier, taxonomy, scored.feedback,
                                              request_prefix + "/refine" + std::to_string(round), prompts);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::MalformedTranscript && e.code() != ErrorCode::PathMismatch) throw;
            result.record.final = ReviewOutcome::discarded;
            result.record.reason = "refinement failed: " + std::string(e.what());
            break;
        }
    }
    result.dialogue.review = result.record;
    return result;
}

// --- Factory -------------------------------------------------------------------------------------------

std::string_view to_string(FactoryStage stage) {
    switch (stage) {
        case FactoryStage::plausibility: return "plausibility";
        case FactoryStage::path: return "path";
        case FactoryStage::demonstration: return "demonstration";
        case FactoryStage::generation: return "generation";
        case FactoryStage::modification: return "modification";
        case FactoryStage::review: return "review";
        case FactoryStage::length: return "length";
    }
    return "?";
}

namespace {

std::optional<FactoryStage> stage_from_string(std::string_view s) {
    for (auto st : {FactoryStage::plausibility, FactoryStage::path, FactoryStage::demonstration,
                    FactoryStage::generation, FactoryStage::modification, FactoryStage::review, FactoryStage::length})
        if (to_string(st) == s) return st;
    return std::nullopt;
}

struct ItemOutcome {
    std::optional<RejectRecord> reject;
    std::optional<ReviewRecord> review;
    std::optional<Dialogue> dialogue;
};

ojson review_json(const ReviewRecord& r) {
    ojson rounds = ojson::array();
    for (const auto& x : r.rounds) rounds.push_back({{"score", x.score}, {"feedback", x.feedback}});
    ojson j{{"rounds", rounds}, {"final", to_string(r.final)}};
    if (!r.reason.empty()) j["reason"] = r.reason;
    return j;
}

ReviewRecord review_from_json(const ojson& j) {
    ReviewRecord r;
    for (const auto& x : j.at("rounds")) r.rounds.push_back({x.at("score").get<int>(), x.at("feedback").get<std::string>()});
    const auto f = j.at("final").get<std::string>();
    r.final = f == "accepted" ? ReviewOutcome::accepted
              : f == "exhausted" ? ReviewOutcome::exhausted
                                 : ReviewOutcome::discarded;
    r.reason = j.value("reason", std::string{});
    return r;
}

std::string checkpoint_header(const FactoryConfig& config) {
    ojson j{{"kind", "header"}, {"seed", config.seed}, {"n", config.n_situations}};
    return j.dump();
}

std::string checkpoint_line(std::size_t index, const ItemOutcome& o) {
    ojson j{{"kind", "item"}, {"index", index}, {"situation_id", situation_id(index)}};
    if (o.reject)
        j["reject"] = {{"stage", to_string(o.reject->stage)}, {"reason", o.reject->reason}, {"retryable", o.reject->retryable}};
    if (o.review) j["review"] = review_json(*o.review);
    if (o.dialogue) j["dialogue"] = ojson::parse(dialogue_to_json(*o.dialogue));
    return j.dump();
}

std::optional<std::pair<std::size_t, ItemOutcome>> parse_checkpoint_line(const std::string& line) {
    try {
        const auto j = ojson::parse(line);
        if (j.value("kind", "") != "item") return std::nullopt;
        ItemOutcome o;
        const auto index = j.at("index").get<std::size_t>();
        if (auto it = j.find("reject"); it != j.end()) {
            auto stage = stage_from_string(it->at("stage").get<std::string>());
            if (!stage) return std::nullopt;
            o.reject = RejectRecord{situation_id(index), *stage, it->at("reason").get<std::string>(),
                                    it->value("retryable", false)};
        }
        if (auto it = j.find("review"); it != j.end()) o.review = review_from_json(*it);
        if (auto it = j.find("dialogue"); it != j.end()) o.dialogue = dialogue_from_json(it->dump());
        if (!o.reject && !o.dialogue) return std::nullopt;
        return std::make_pair(index, std::move(o));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

bool retryable_code(ErrorCode code) {
    return code == ErrorCode::Timeout || code == ErrorCode::RateLimited || code == ErrorCode::Unavailable;
}

class Checkpoint {
public:
    // Loads finished items and rewrites the file without torn or retryable
    // lines, so later appends start on a clean line.
    Checkpoint(const std::filesystem::path& path, const FactoryConfig& config,
               std::map<std::size_t, ItemOutcome>& loaded)
        : path_(path) {
        if (path_.empty()) return;
        std::vector<std::string> keep;
        if (std::filesystem::exists(path_)) {
            std::ifstream in(path_, std::ios::binary);
            std::string line;
            bool first = true;
            while (std::getline(in, line)) {
                if (first) {
                    first = false;
                    if (line != checkpoint_header(config))
                        throw Error(ErrorCode::BadConfig, "checkpoint " + path_.string() + " belongs to a different run");
                    continue;
                }
                auto parsed = parse_checkpoint_line(line);
                if (!parsed || parsed->first >= config.n_situations || loaded.count(parsed->first)) continue;
                if (parsed->second.reject && parsed->second.reject->retryable) continue;
                keep.push_back(line);
                loaded.emplace(parsed->first, std::move(parsed->second));
            }
        }
        const auto tmp = path_.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp);
            out << checkpoint_header(config) << '\n';
            for (const auto& l : keep) out << l << '\n';
        }
        std::filesystem::rename(tmp, path_);
        out_.open(path_, std::ios::binary | std::ios::app);
        if (!out_) throw Error(ErrorCode::IoError, "cannot append to " + path_.string());
    }

    void append(std::size_t index, const ItemOutcome& o) {
        if (path_.empty()) return;
        const auto line = checkpoint_line(index, o);
        std::lock_guard lock(mu_);
        out_ << line << '\n';
        out_.flush();
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
    std::mutex mu_;
};

ItemOutcome process_item(std::size_t index, const std::vector<Dialogue>& seeds, const LabelSet& taxonomy,
                         const FactoryBackends& backends, const FactoryConfig& config, const PromptLibrary& prompts) {
    const auto sid = situation_id(index);
    ItemOutcome out;
    FactoryStage stage = FactoryStage::plausibility;
    auto reject = [&](std::string reason, bool retryable = false) {
        out.reject = RejectRecord{sid, stage, flatten(reason), retryable};
        return out;
    };
    try {
        const auto situation = sample_situation(situation_seed(config.seed, index), taxonomy);
        const auto verdicts =
            judge_situation(situation, backends.judges, taxonomy, config.plausibility, sid + "/plausibility", prompts);
        if (!verdicts_accept(verdicts, config.plausibility.rule)) {
            std::string reason;
            for (const auto& v : verdicts)
                if (!v.plausible) reason += (reason.empty() ? "" : "; ") + v.judge_name + ": " + v.rationale;
            return reject("implausible: " + reason);
        }

        stage = FactoryStage::path;
        const auto path = generate_path(situation, *backends.generator, taxonomy, config.path, sid + "/path", prompts);

        stage = FactoryStage::demonstration;
        const auto& demo = retrieve_demonstration(situation, seeds);

        stage = FactoryStage::generation;
        const auto prompt = build_cot_prompt(situation, demo, path, taxonomy, prompts);
        auto draft = generate_dialogue(prompt, *backends.generator, taxonomy, situation, path,
                                       "gen-" + sid.substr(sid.find('-') + 1), sid + "/generate");

        stage = FactoryStage::modification;
        auto modified = modify_dialogue(draft, *backends.modifier, taxonomy, {}, sid + "/modify", prompts);

        stage = FactoryStage::review;
        auto reviewed = review_loop(modified, *backends.reviewer, *backends.modifier, taxonomy, config.review,
                                    sid + "/review", prompts);
        out.review = reviewed.record;
        if (reviewed.record.final != ReviewOutcome::accepted) {
            std::string reason = std::string(to_string(reviewed.record.final));
            if (!reviewed.record.rounds.empty())
                reason += " with score " + std::to_string(reviewed.record.rounds.back().score);
            if (!reviewed.record.reason.empty()) reason += ": " + reviewed.record.reason;
            return reject(reason);
        }

        stage = FactoryStage::length;
        if (reviewed.dialogue.utterances.size() < config.min_utterances)
            return reject("only " + std::to_string(reviewed.dialogue.utterances.size()) + " utterances");
        validate_dialogue(reviewed.dialogue, taxonomy);
        out.dialogue = std::move(reviewed.dialogue);
        return out;
    } catch (const Error& e) {
        return reject(e.what(), retryable_code(e.code()));
    } catch (const std::exception& e) {
        return reject(e.what());
    }
}

FunnelReport build_funnel(const std::map<std::size_t, ItemOutcome>& outcomes, std::size_t n_seeds,
                          std::size_t resumed) {
    FunnelReport f;
    f.sampled = outcomes.size();
    f.seeds = n_seeds;
    f.resumed_items = resumed;
    for (const auto& [_, o] : outcomes) {
        const int reached = o.reject ? static_cast<int>(o.reject->stage) : 1000;
        auto passed = [&](FactoryStage s) { return reached > static_cast<int>(s); };
        f.plausible += passed(FactoryStage::plausibility);
        f.path_generated += passed(FactoryStage::path);
        f.demonstrated += passed(FactoryStage::demonstration);
        f.generated += passed(FactoryStage::generation);
        f.modified += passed(FactoryStage::modification);
        f.accepted += passed(FactoryStage::review);
        f.length_ok += passed(FactoryStage::length);
        if (o.reject) ++f.rejected_by_stage[std::string(to_string(o.reject->stage))];
        if (o.review) {
            switch (o.review->final) {
                case ReviewOutcome::accepted:
                    ++(o.review->rounds.size() == 1 ? f.accepted_first_round : f.accepted_after_refinement);
                    break;
                case ReviewOutcome::discarded: ++f.review_discarded; break;
                case ReviewOutcome::exhausted: ++f.review_exhausted; break;
            }
        }
    }
    f.corpus_size = n_seeds + f.length_ok;
    return f;
}

}  // namespace

std::string situation_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sit-%06zu", index);
    return buf;
}

std::string funnel_json(const FunnelReport& r) {
    ojson j{{"sampled", r.sampled},
            {"plausible", r.plausible},
            {"path_generated", r.path_generated},
            {"demonstrated", r.demonstrated},
            {"generated", r.generated},
            {"modified", r.modified},
            {"accepted", r.accepted},
            {"length_ok", r.length_ok},
            {"seeds", r.seeds},
            {"corpus_size", r.corpus_size},
            {"rejected_by_stage", r.rejected_by_stage},
            {"review",
             {{"accepted_first_round", r.accepted_first_round},
              {"accepted_after_refinement", r.accepted_after_refinement},
              {"discarded", r.review_discarded},
              {"exhausted", r.review_exhausted}}},
            {"resumed_items", r.resumed_items}};
    return j.dump();
}

std::string reject_json(const RejectRecord& r) {
    ojson j{{"situation_id", r.situation_id}, {"stage", to_string(r.stage)}, {"reason", r.reason}};
    if (r.retryable) j["retryable"] = true;
    return j.dump();
}

FactoryBackends FactoryBackends::from_bindings(const BackendBindings& bindings) {
    FactoryBackends b;
    b.generator = bindings.for_role(RoleTag::generator);
    b.modifier = bindings.for_role(RoleTag::modifier);
    b.reviewer = bindings.for_role(RoleTag::reviewer);
    b.judges = bindings.plausibility_judges;
    if (b.judges.empty()) b.judges.push_back(bindings.for_role(RoleTag::plausibility_judge));
    return b;
}

FactoryResult run_factory(const std::vector<Dialogue>& seeds, const LabelSet& taxonomy,
                          const FactoryBackends& backends, const FactoryConfig& config, const PromptLibrary& prompts) {
    if (seeds.empty()) throw Error(ErrorCode::EmptySeedCorpus, "the factory needs seed dialogues");
    if (!backends.generator || !backends.modifier || !backends.reviewer)
        throw Error(ErrorCode::BadConfig, "generator, modifier and reviewer backends are required");
    if (backends.judges.empty()) throw Error(ErrorCode::BadConfig, "at least one plausibility judge is required");
    if (config.workers == 0) throw Error(ErrorCode::BadConfig, "workers must be >= 1");
    for (const auto& d : seeds) validate_dialogue(d, taxonomy);

    std::map<std::size_t, ItemOutcome> done;
    Checkpoint checkpoint(config.checkpoint, config, done);
    const std::size_t resumed = done.size();

    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < config.n_situations; ++i)
        if (!done.count(i)) todo.push_back(i);

    std::vector<std::optional<ItemOutcome>> fresh(todo.size());
    std::atomic<std::size_t> next{0};
    const std::size_t limit = config.stop_after ? std::min(*config.stop_after, todo.size()) : todo.size();
    auto worker = [&] {
        for (;;) {
            const auto k = next.fetch_add(1);
            if (k >= limit) return;
            fresh[k] = process_item(todo[k], seeds, taxonomy, backends, config, prompts);
            checkpoint.append(todo[k], *fresh[k]);
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 1; w < std::min(config.workers, limit); ++w) pool.emplace_back(worker);
        worker();
    }
    for (std::size_t k = 0; k < limit; ++k) done.emplace(todo[k], std::move(*fresh[k]));

    FactoryResult result;
    result.complete = limit == todo.size();
    result.funnel = build_funnel(done, seeds.size(), resumed);
    result.corpus = seeds;
    for (auto& [_, o] : done) {
        if (o.dialogue) result.corpus.push_back(*o.dialogue);
        if (o.reject) result.rejects.push_back(*o.reject);
    }
    return result;
}

}  // namespace esckit
