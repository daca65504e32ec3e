#include <doctest.h>

#include <fstream>
#include <set>

#include <json.hpp>

#include "esckit/synthesis.hpp"
#include "fixtures.hpp"

using namespace esckit;
using namespace fixtures;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::IoError;
}

std::shared_ptr<ScriptedBackend> fixed(RoleTag role, std::string reply, std::string name = "fixed") {
    return scripted_backend({responder(role, [reply](const ChatRequest&) { return std::optional<std::string>(reply); })},
                            std::move(name));
}

bool in_taxonomy_order(const std::vector<std::string>& ids, const std::vector<LabelDef>& labels) {
    std::size_t last = 0;
    bool first = true;
    for (const auto& id : ids) {
        std::size_t pos = 0;
        while (labels[pos].id != id) ++pos;
        if (!first && pos <= last) return false;
        last = pos;
        first = false;
    }
    return true;
}

FactoryBackends backends_of(const ScriptedFactory& s) { return {s.generator, s.modifier, s.reviewer, s.judges}; }

}  // namespace

TEST_SUITE("synthesis") {

TEST_CASE("sampled situations satisfy the situation invariants") {
    const auto& tax = cpsdd();
    std::map<std::size_t, int> counts;
    std::set<std::string> groups;
    for (std::uint64_t i = 0; i < 600; ++i) {
        const auto s = sample_situation(situation_seed(42, i), tax);
        validate_situation(s, tax, "sampled");
        CHECK(in_taxonomy_order(s.problem_ids, tax.problems));
        CHECK(in_taxonomy_order(s.cause_ids, tax.causes));
        CHECK(in_taxonomy_order(s.focus_ids, tax.focuses));
        ++counts[s.problem_ids.size()];
        groups.insert(s.group_id);
    }
    // Each list length 1..3 shows up, and every group is drawn.
    CHECK(counts.size() == 3);
    for (const auto& [n, c] : counts) CHECK(c > 120);
    CHECK(groups.size() == tax.groups.size());
}

TEST_CASE("sampling is reproducible per item") {
    CHECK(situation_seed(1, 5) == situation_seed(1, 5));
    CHECK(situation_seed(1, 5) != situation_seed(1, 6));
    CHECK(situation_seed(1, 5) != situation_seed(2, 5));
    CHECK(sample_situation(situation_seed(9, 3), cpsdd()) == sample_situation(situation_seed(9, 3), cpsdd()));
}

TEST_CASE("seeding selection stays within the per-group budget") {
    std::vector<Situation> pool;
    for (std::uint64_t i = 0; i < 400; ++i) pool.push_back(sample_situation(situation_seed(7, i), cpsdd()));
    const auto picked = select_seeding_situations(pool, cpsdd(), 3);
    std::map<std::string, int> per_group;
    std::set<std::size_t> unique(picked.begin(), picked.end());
    CHECK(unique.size() == picked.size());
    for (auto i : picked) ++per_group[pool[i].group_id];
    for (const auto& [g, n] : per_group) CHECK(n <= 3);
    CHECK(per_group.size() == cpsdd().groups.size());
}

TEST_CASE("verdict parsing") {
    CHECK(parse_verdict("yes\nRationale: fine")->plausible);
    CHECK(parse_verdict("yes\nRationale: fine")->rationale == "fine");
    CHECK_FALSE(parse_verdict("No. A child cannot have workplace stress.")->plausible);
    CHECK(parse_verdict("Verdict: YES")->plausible);
    CHECK(parse_verdict("是\n理由充分")->plausible);
    CHECK_FALSE(parse_verdict("不合理")->plausible);
    CHECK_FALSE(parse_verdict("It depends.").has_value());
}

TEST_CASE("unanimous and majority rules") {
    const auto s = simple_situation(cpsdd());
    std::vector<BackendPtr> judges = {fixed(RoleTag::plausibility_judge, "yes", "a"),
                                      fixed(RoleTag::plausibility_judge, "yes", "b"),
                                      fixed(RoleTag::plausibility_judge, "no\nRationale: odd", "c")};
    const auto v = judge_situation(s, judges, cpsdd(), {}, "p");
    REQUIRE(v.size() == 3);
    CHECK(v[2].judge_name == "c");
    CHECK(v[2].rationale == "odd");
    CHECK_FALSE(verdicts_accept(v, PlausibilityRule::unanimous));
    CHECK(verdicts_accept(v, PlausibilityRule::majority));
    CHECK_FALSE(verdicts_accept({v[0], v[2]}, PlausibilityRule::majority));
}

TEST_CASE("an unparseable verdict rejects after re-asks") {
    auto judge = fixed(RoleTag::plausibility_judge, "maybe", "j");
    const auto v = judge_situation(simple_situation(cpsdd()), {judge}, cpsdd(), {PlausibilityRule::unanimous, 2}, "p");
    CHECK_FALSE(v[0].plausible);
    CHECK(v[0].rationale.find("maybe") != std::string::npos);
    CHECK(judge->served_count() == 3);
    const auto reask = judge->transcript().back().request;
    CHECK(reask.messages.size() == 6);
    CHECK(reask.request_id == "p/j0/a2");
}

TEST_CASE("filter_plausible keeps indices") {
    auto judge = scripted_backend({responder(RoleTag::plausibility_judge, [](const ChatRequest& r) {
        return std::optional<std::string>(r.request_id.find("sit-000001") != std::string::npos ? "no" : "yes");
    })});
    std::vector<Situation> sits(3, simple_situation(cpsdd()));
    const auto res = filter_plausible(sits, {judge}, cpsdd());
    REQUIRE(res.kept.size() == 2);
    REQUIRE(res.rejected.size() == 1);
    CHECK(res.rejected[0].index == 1);
    CHECK(code_of([&] { filter_plausible(sits, {}, cpsdd()); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("demonstration retrieval") {
    const auto& tax = cpsdd();
    Situation target{"parents", {"anxiety", "loneliness"}, {tax.causes[0].id}, {tax.focuses[0].id}};
    auto mk = [&](const std::string& id, Situation s) { return make_dialogue(id, tax, {"question"}, s); };
    std::vector<Dialogue> seeds = {
        mk("s3", {"parents", {"anxiety"}, {tax.causes[1].id}, {tax.focuses[1].id}}),
        mk("s2", {"parents", {"anxiety", "loneliness"}, {tax.causes[0].id}, {tax.focuses[1].id}}),
        mk("s1", {"parents", {"anxiety", "loneliness"}, {tax.causes[0].id}, {tax.focuses[1].id}}),
        mk("s0", {"drug_addicts", {"anxiety", "loneliness"}, {tax.causes[0].id}, {tax.focuses[0].id}}),
    };
    CHECK(situation_overlap(target, seeds[3].situation) == 4);
    CHECK(situation_overlap(target, seeds[1].situation) == 3);
    // Same group wins over higher overlap; ties broken by id.
    CHECK(retrieve_demonstration(target, seeds).id == "s1");
    target.group_id = "elderly";
    CHECK(retrieve_demonstration(target, seeds).id == "s0");
    CHECK(code_of([&] { retrieve_demonstration(target, {}); }) == ErrorCode::EmptySeedCorpus);
}

TEST_CASE("path parsing") {
    const auto& tax = cpsdd();
    std::string bad;
    auto p = parse_path("Path: Question -> Comforting -> Reflection of Feelings", tax, bad);
    REQUIRE(p);
    CHECK(p->steps == std::vector<std::string>{"question", "comforting", "reflection_of_feelings"});
    p = parse_path("1. Question\n2. Encouraging\n3. \"Information\"", tax, bad);
    REQUIRE(p);
    CHECK(p->steps == std::vector<std::string>{"question", "encouraging", "information"});
    p = parse_path("提问、安慰，鼓励", tax, bad);
    REQUIRE(p);
    CHECK(p->steps.size() == 3);
    CHECK_FALSE(parse_path("Question, Hypnosis", tax, bad));
    CHECK(bad == "Hypnosis");
}

TEST_CASE("path generation enforces bounds after re-asks") {
    const auto s = simple_situation(cpsdd());
    auto short_path = fixed(RoleTag::generator, "Question, Comforting");
    CHECK(code_of([&] { generate_path(s, *short_path, cpsdd()); }) == ErrorCode::PathLengthOutOfBounds);
    CHECK(short_path->served_count() == 3);

    auto unknown = fixed(RoleTag::generator, "Question, Telepathy, Comforting, Question");
    try {
        generate_path(s, *unknown, cpsdd());
        FAIL("expected UnresolvableStrategy");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnresolvableStrategy);
        CHECK(e.detail() == "Telepathy");
    }

    auto recovering = scripted_backend({responder(RoleTag::generator, [](const ChatRequest& r) -> std::optional<std::string> {
        if (r.request_id.ends_with("/a0")) return "Question";
        return "Question, Comforting, Encouraging, Affirmation";
    })});
    const auto path = generate_path(s, *recovering, cpsdd());
    CHECK(path.steps.size() == 4);
    CHECK(recovering->transcript().back().request.messages.back().text.find("between 4 and 12") != std::string::npos);
}

TEST_CASE("transcript round trip") {
    const auto& tax = cpsdd();
    const auto d = make_dialogue("t", tax, {"question", "comforting"}, simple_situation(tax));
    const auto text = render_transcript(d.utterances, tax);
    CHECK(text.rfind("System: " + tax.greeting + "\n", 0) == 0);
    CHECK(text.find("System [Question]: t system 1") != std::string::npos);
    CHECK(parse_transcript(text, tax) == d.utterances);
}

TEST_CASE("transcript parsing accepts Chinese prefixes and continuation lines") {
    const auto& tax = cpsdd();
    const auto turns = parse_transcript("Here is the dialogue:\n系统：你好\n用户：我很累\n还睡不着\n系统【安慰】：辛苦了", tax);
    REQUIRE(turns.size() == 3);
    CHECK(turns[1].text == "我很累 还睡不着");
    CHECK(turns[2].strategy_id == "comforting");
}

TEST_CASE("malformed transcripts") {
    const auto& tax = cpsdd();
    auto malformed = [&](const std::string& t) { return code_of([&] { parse_transcript(t, tax); }); };
    CHECK(malformed("User: hi\nSystem [Question]: ok") == ErrorCode::MalformedTranscript);
    CHECK(malformed("System: hi\nUser: a\nUser: b") == ErrorCode::MalformedTranscript);
    CHECK(malformed("System: hi\nUser: a\nSystem [Telepathy]: b") == ErrorCode::MalformedTranscript);
    CHECK(malformed("System: hi\nUser [Question]: a") == ErrorCode::MalformedTranscript);
    CHECK(malformed("System: hi\nUser:   ") == ErrorCode::MalformedTranscript);
    CHECK(malformed("no speakers here") == ErrorCode::MalformedTranscript);
}

TEST_CASE("chain-of-thought prompt layout") {
    const auto& tax = cpsdd();
    const auto demo = make_dialogue("demo", tax, {"question"}, simple_situation(tax));
    const auto p = build_cot_prompt(simple_situation(tax), demo, DialoguePath{{"question", "comforting"}}, tax);
    const auto text = p.render();
    const auto a = text.find("## Client profile");
    const auto b = text.find("## Demonstration");
    const auto c = text.find("## Dialogue path");
    const auto d = text.find("## Task");
    CHECK(a < b);
    CHECK(b < c);
    CHECK(c < d);
    CHECK(d != std::string::npos);
    CHECK(text.find("1. Question\n2. Comforting") != std::string::npos);
    CHECK(text.find("demo system 1") != std::string::npos);
    CHECK(text.find("exactly 2 counselor turns") != std::string::npos);
}

TEST_CASE("generation checks the realized path") {
    const auto& tax = cpsdd();
    const DialoguePath path{{"question", "comforting"}};
    const auto demo = make_dialogue("demo", tax, {"question"}, simple_situation(tax));
    const auto prompt = build_cot_prompt(simple_situation(tax), demo, path, tax);
    auto good = fixed(RoleTag::generator, transcript_for(path.steps, tax, "g"));
    const auto d = generate_dialogue(prompt, *good, tax, simple_situation(tax), path, "gen-1");
    CHECK(d.source == DialogueSource::generated);
    CHECK(realized_path(d) == path.steps);

    auto swapped = fixed(RoleTag::generator, transcript_for({"comforting", "question"}, tax, "g"));
    CHECK(code_of([&] { generate_dialogue(prompt, *swapped, tax, simple_situation(tax), path, "x"); }) ==
          ErrorCode::PathMismatch);
    auto untagged = fixed(RoleTag::generator, "System: hi\nUser: a\nSystem: b\nUser: c\nSystem: d");
    CHECK(code_of([&] { generate_dialogue(prompt, *untagged, tax, simple_situation(tax), path, "x"); }) ==
          ErrorCode::MalformedTranscript);
}

TEST_CASE("modification keeps structure") {
    const auto& tax = cpsdd();
    const std::vector<std::string> path = {"question", "comforting"};
    const auto draft = make_dialogue("m", tax, path, simple_situation(tax), DialogueSource::generated);
    auto edit = fixed(RoleTag::modifier, transcript_for(path, tax, "m", " edited"));
    const auto out = modify_dialogue(draft, *edit, tax, "be warmer");
    CHECK(out.utterances[1].text == "m user 1 edited");
    CHECK(edit->transcript()[0].request.last_text().find("be warmer") != std::string::npos);

    auto shorter = fixed(RoleTag::modifier, transcript_for({"question"}, tax, "m"));
    CHECK(code_of([&] { modify_dialogue(draft, *shorter, tax); }) == ErrorCode::MalformedTranscript);
    auto retagged = fixed(RoleTag::modifier, transcript_for({"question", "question"}, tax, "m"));
    CHECK(code_of([&] { modify_dialogue(draft, *retagged, tax); }) == ErrorCode::MalformedTranscript);
}

TEST_CASE("review parsing") {
    CHECK(parse_review("Score: 8\nFeedback: add detail")->score == 8);
    CHECK(parse_review("Score: 8\nFeedback: add detail")->feedback == "add detail");
    CHECK(parse_review("score = 10")->score == 10);
    CHECK(parse_review("评分：7\n反馈：不够具体")->feedback == "不够具体");
    CHECK(parse_review("9\nvery natural")->feedback == "very natural");
    CHECK_FALSE(parse_review("Score: 8.5"));
    CHECK_FALSE(parse_review("Score: 0"));
    CHECK_FALSE(parse_review("Score: 11"));
    CHECK_FALSE(parse_review("great job"));
}

TEST_CASE("a failed refinement discards with a reason") {
    const auto& tax = cpsdd();
    const auto draft = make_dialogue("m", tax, {"question", "comforting"}, simple_situation(tax), DialogueSource::generated);
    auto reviewer = fixed(RoleTag::reviewer, "Score: 7\nFeedback: meh");
    auto broken = fixed(RoleTag::modifier, "System: hi");
    const auto r = review_loop(draft, *reviewer, *broken, tax);
    CHECK(r.record.final == ReviewOutcome::discarded);
    CHECK(r.record.reason.rfind("refinement failed", 0) == 0);
    CHECK(r.modifier_calls == 1);
    CHECK(code_of([&] { review_loop(draft, *reviewer, *broken, tax, ReviewOptions{0}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("factory with the majority rule keeps more situations") {
    const auto& tax = cpsdd();
    FactoryConfig cfg;
    cfg.n_situations = 40;
    cfg.plausibility.rule = PlausibilityRule::majority;
    const auto s = scripted_factory(tax);
    const auto r = run_factory(seed_corpus(tax, 5), tax, backends_of(s), cfg);
    // Only one of three judges rejects, so the majority accepts everything.
    CHECK(r.funnel.plausible == 40);
    CHECK(r.funnel.sampled == 40);
}

TEST_CASE("factory without seeds is refused") {
    FactoryConfig cfg;
    cfg.n_situations = 4;
    const auto s = scripted_factory(cpsdd());
    CHECK(code_of([&] { run_factory({}, cpsdd(), backends_of(s), cfg); }) == ErrorCode::EmptySeedCorpus);
}

TEST_CASE("checkpoint header must match the run") {
    const auto& tax = cpsdd();
    TempDir dir;
    FactoryConfig cfg;
    cfg.n_situations = 10;
    cfg.checkpoint = dir / "ck";
    auto s = scripted_factory(tax);
    run_factory(seed_corpus(tax, 3), tax, backends_of(s), cfg);
    cfg.seed = 7;
    CHECK(code_of([&] { run_factory(seed_corpus(tax, 3), tax, backends_of(s), cfg); }) == ErrorCode::BadConfig);
}

TEST_CASE("transport failures are retried on resume") {
    const auto& tax = cpsdd();
    TempDir dir;
    FactoryConfig cfg;
    cfg.n_situations = 40;
    cfg.checkpoint = dir / "ck";
    auto s = scripted_factory(tax);
    auto down = scripted_factory(tax);
    ScriptRule outage;
    outage.role = RoleTag::reviewer;
    outage.repeat = true;
    outage.raise = ErrorCode::Unavailable;
    down.reviewer = scripted_backend({outage}, "reviewer");
    const auto first = run_factory(seed_corpus(tax, 3), tax, backends_of(down), cfg);
    CHECK(first.funnel.length_ok == 0);
    bool retryable = false;
    for (const auto& r : first.rejects) retryable |= r.retryable;
    CHECK(retryable);

    const auto second = run_factory(seed_corpus(tax, 3), tax, backends_of(s), cfg);
    auto clean = cfg;
    clean.checkpoint.clear();
    auto fresh = scripted_factory(tax);
    const auto reference = run_factory(seed_corpus(tax, 3), tax, backends_of(fresh), clean);
    CHECK(serialize_corpus(second.corpus, tax) == serialize_corpus(reference.corpus, tax));
    CHECK(second.funnel.length_ok == reference.funnel.length_ok);
}

TEST_CASE("funnel and reject records serialize") {
    FunnelReport f;
    f.sampled = 3;
    f.rejected_by_stage["review"] = 1;
    const auto j = nlohmann::json::parse(funnel_json(f));
    CHECK(j.at("sampled") == 3);
    const auto r = nlohmann::json::parse(reject_json({"sit-000001", FactoryStage::review, "low", false}));
    CHECK(r.at("stage") == "review");
    CHECK(situation_id(12) == "sit-000012");
}

}
