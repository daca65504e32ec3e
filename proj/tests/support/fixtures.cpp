#include "fixtures.hpp"

#include <atomic>
#include <cstdio>
#include <string_view>

#include "esckit/text.hpp"

namespace fixtures {

const LabelSet& cpsdd() {
    static const LabelSet set = builtin_taxonomy("cpsdd");
    return set;
}

const LabelSet& esconv() {
    static const LabelSet set = builtin_taxonomy("esconv");
    return set;
}

TempDir::TempDir() {
    static std::atomic<int> counter{0};
    const auto base = std::filesystem::temp_directory_path();
    std::random_device rd;
    for (;;) {
        auto candidate = base / ("esckit-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        if (std::filesystem::create_directory(candidate)) {
            path_ = candidate;
            return;
        }
    }
}

TempDir::~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
}

Situation simple_situation(const LabelSet& taxonomy) {
    return {taxonomy.groups.front().id, {taxonomy.problems.front().id}, {taxonomy.causes.front().id},
            {taxonomy.focuses.front().id}};
}

Dialogue make_dialogue(const std::string& id, const LabelSet& taxonomy, const std::vector<std::string>& path,
                       const Situation& situation, DialogueSource source) {
    Dialogue d;
    d.id = id;
    d.situation = situation;
    d.path.steps = path;
    d.source = source;
    d.utterances.push_back({Speaker::system, taxonomy.greeting, std::nullopt});
    for (std::size_t k = 0; k < path.size(); ++k) {
        d.utterances.push_back({Speaker::user, id + " user " + std::to_string(k + 1), std::nullopt});
        d.utterances.push_back({Speaker::system, id + " system " + std::to_string(k + 1), path[k]});
    }
    if (source == DialogueSource::generated) d.review = ReviewRecord{{{9, "ok"}}, ReviewOutcome::accepted, {}};
    return d;
}

namespace {

const char* const kWords[] = {"i",     "feel", "so",    "tired", "work",  "exam",  "mother", "sleep",
                              "worry", "why",  "maybe", "help",  "today", "alone", "stress", "friends"};
const char* const kHan[] = {"我", "很", "累", "工", "作", "考", "试", "妈", "睡", "担", "心", "朋", "友", "压", "力"};

std::string random_text(std::mt19937_64& rng, std::size_t& tokens) {
    std::uniform_int_distribution<int> n_words(0, 12);
    std::uniform_int_distribution<int> n_han(0, 20);
    std::uniform_int_distribution<std::size_t> pick_word(0, std::size(kWords) - 1);
    std::uniform_int_distribution<std::size_t> pick_han(0, std::size(kHan) - 1);
    int w = n_words(rng);
    int h = n_han(rng);
    if (w + h == 0) w = 1;
    std::string out;
    for (int i = 0; i < w; ++i) {
        if (!out.empty()) out += ' ';
        out += kWords[pick_word(rng)];
    }
    if (h > 0 && !out.empty()) out += ' ';
    for (int i = 0; i < h; ++i) out += kHan[pick_han(rng)];
    tokens = static_cast<std::size_t>(w + h);
    return out;
}

}  // namespace

Dialogue random_dialogue(std::mt19937_64& rng, const std::string& id, const LabelSet& taxonomy,
                         std::size_t min_steps, std::size_t max_steps, std::vector<std::size_t>* expected_tokens) {
    std::uniform_int_distribution<std::size_t> steps_dist(min_steps, max_steps);
    std::uniform_int_distribution<std::size_t> strat(0, taxonomy.strategies.size() - 1);
    Dialogue d;
    d.id = id;
    d.situation = simple_situation(taxonomy);
    const auto steps = steps_dist(rng);
    auto push = [&](Speaker s, std::optional<std::string> tag) {
        std::size_t n = 0;
        d.utterances.push_back({s, random_text(rng, n), std::move(tag)});
        if (expected_tokens) expected_tokens->push_back(n);
    };
    push(Speaker::system, std::nullopt);
    for (std::size_t k = 0; k < steps; ++k) {
        const auto& sid = taxonomy.strategies[strat(rng)].id;
        d.path.steps.push_back(sid);
        push(Speaker::user, std::nullopt);
        push(Speaker::system, sid);
    }
    return d;
}

std::vector<Dialogue> seed_corpus(const LabelSet& taxonomy, std::size_t n) {
    std::vector<Dialogue> out;
    for (std::size_t i = 0; i < n; ++i) {
        Situation s{taxonomy.groups[i % taxonomy.groups.size()].id,
                    {taxonomy.problems[i % taxonomy.problems.size()].id},
                    {taxonomy.causes[i % taxonomy.causes.size()].id},
                    {taxonomy.focuses[i % taxonomy.focuses.size()].id}};
        char id[32];
        std::snprintf(id, sizeof id, "seed-%03zu", i);
        out.push_back(make_dialogue(id, taxonomy, factory_path(1000 + i, taxonomy), s));
    }
    return out;
}

ScriptRule responder(std::optional<RoleTag> role, std::function<std::optional<std::string>(const ChatRequest&)> fn) {
    ScriptRule r;
    r.role = role;
    r.repeat = true;
    r.responder = std::move(fn);
    return r;
}

std::string request_text(const ChatRequest& request) {
    std::string out;
    for (const auto& m : request.messages) out += m.text + "\n";
    return out;
}

std::size_t situation_index(const std::string& request_id) {
    const auto at = request_id.find("sit-");
    if (at == std::string::npos) return static_cast<std::size_t>(-1);
    return std::stoul(request_id.substr(at + 4, 6));
}

std::string transcript_for(const std::vector<std::string>& path, const LabelSet& taxonomy, const std::string& tag,
                           const std::string& suffix) {
    std::string out = "System: " + taxonomy.greeting + "\n";
    for (std::size_t k = 0; k < path.size(); ++k) {
        out += "User: " + tag + " user " + std::to_string(k + 1) + suffix + "\n";
        out += "System [" + taxonomy.find_strategy(path[k])->name + "]: " + tag + " system " + std::to_string(k + 1) +
               suffix + "\n";
    }
    return out;
}

FactoryCase factory_case(std::size_t index) {
    const auto r = index % 40;
    if (r < 13) return FactoryCase::implausible;
    const auto j = r - 13;
    if (j == 0) return FactoryCase::bad_path;
    if (j == 1) return FactoryCase::malformed;
    if (j <= 17) return FactoryCase::accept_first;
    if (j == 18) return FactoryCase::accept_short;
    if (j <= 22) return FactoryCase::refine_then_accept;
    if (j == 23) return FactoryCase::exhausted;
    if (j <= 25) return FactoryCase::low_score;
    return FactoryCase::unparseable_score;
}

std::vector<std::string> factory_path(std::size_t index, const LabelSet& taxonomy) {
    const std::size_t steps = factory_case(index) == FactoryCase::accept_short ? 4 : 5;
    std::vector<std::string> out;
    for (std::size_t s = 0; s < steps; ++s)
        out.push_back(taxonomy.strategies[(index + s * 3) % taxonomy.strategies.size()].id);
    return out;
}

namespace {

int round_of(const std::string& id) {
    const auto at = id.find("/r");
    return at == std::string::npos ? 0 : std::stoi(id.substr(at + 2));
}

std::string names_of(const std::vector<std::string>& path, const LabelSet& taxonomy) {
    std::vector<std::string> names;
    for (const auto& s : path) names.push_back(taxonomy.find_strategy(s)->name);
    return text::join(names, ", ");
}

}  // namespace

ScriptedFactory scripted_factory(const LabelSet& taxonomy) {
    const LabelSet* tax = &taxonomy;
    ScriptedFactory f;
    for (int k = 0; k < 3; ++k) {
        f.judges.push_back(scripted_backend(
            {responder(RoleTag::plausibility_judge,
                       [k](const ChatRequest& req) -> std::optional<std::string> {
                           const auto i = situation_index(req.request_id);
                           if (factory_case(i) == FactoryCase::implausible && static_cast<int>(i % 3) == k)
                               return "no\nRationale: the causes do not fit this group";
                           // One judge needs a re-ask now and then.
                           if (k == 0 && i % 7 == 0 && req.request_id.ends_with("/a0")) return "Hard to say.";
                           return "yes\nRationale: a common situation";
                       })},
            "judge-" + std::string(1, static_cast<char>('a' + k))));
    }
    f.generator = scripted_backend(
        {responder(RoleTag::generator, [tax](const ChatRequest& req) -> std::optional<std::string> {
            const auto i = situation_index(req.request_id);
            const auto c = factory_case(i);
            const auto path = factory_path(i, *tax);
            if (req.request_id.find("/path") != std::string::npos) {
                if (c == FactoryCase::bad_path) return "Telepathy, Hypnosis, Fortune telling, Mind reading";
                return names_of(path, *tax);
            }
            if (c == FactoryCase::malformed) return "System: hello\nUser: one\nUser: two\nSystem: three\n";
            return transcript_for(path, *tax, "gen-" + std::to_string(i));
        })},
        "generator");
    f.modifier = scripted_backend(
        {responder(RoleTag::modifier, [tax](const ChatRequest& req) -> std::optional<std::string> {
            const auto i = situation_index(req.request_id);
            const auto path = factory_path(i, *tax);
            const auto at = req.request_id.find("/refine");
            const std::string suffix =
                at == std::string::npos ? " (edited)" : " (revised " + req.request_id.substr(at + 7) + ")";
            return transcript_for(path, *tax, "gen-" + std::to_string(i), suffix);
        })},
        "modifier");
    f.reviewer = scripted_backend(
        {responder(RoleTag::reviewer, [](const ChatRequest& req) -> std::optional<std::string> {
            const auto i = situation_index(req.request_id);
            const int round = round_of(req.request_id.substr(req.request_id.find("/review") + 7));
            switch (factory_case(i)) {
                case FactoryCase::refine_then_accept:
                    return round == 1 ? "Score: 8\nFeedback: add concrete details" : "Score: 9\nFeedback: good";
                case FactoryCase::exhausted:
                    return round == 2 ? "Score: 8\nFeedback: still generic" : "Score: 7\nFeedback: too generic";
                case FactoryCase::low_score: return "Score: 5\nFeedback: unrealistic client";
                case FactoryCase::unparseable_score: return "Looks great overall, nothing to add.";
                default: return "Score: 9\nFeedback: natural and supportive";
            }
        })},
        "reviewer");
    return f;
}

}  // namespace fixtures
