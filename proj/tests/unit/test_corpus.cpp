#include <doctest.h>

#include <fstream>
#include <random>

#include <json.hpp>

#include "esckit/corpus.hpp"
#include "fixtures.hpp"

using namespace esckit;
using namespace fixtures;

namespace {

std::string violation_of(const Dialogue& d) {
    try {
        validate_dialogue(d, cpsdd());
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvariantViolation);
        return e.detail();
    }
    return {};
}

Dialogue sample() {
    return make_dialogue("d1", cpsdd(), {"question", "comforting", "encouraging"}, simple_situation(cpsdd()));
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("a well-formed dialogue validates") {
    CHECK(violation_of(sample()).empty());
    CHECK(sample().count(Speaker::user) == 3);
    CHECK(realized_path(sample()) == std::vector<std::string>{"question", "comforting", "encouraging"});
}

TEST_CASE("each invariant is enforced") {
    auto d = sample();
    d.utterances.erase(d.utterances.begin());
    CHECK(violation_of(d).find("greeting") != std::string::npos);

    d = sample();
    std::swap(d.utterances[1], d.utterances[2]);
    CHECK(violation_of(d).find("alternation") != std::string::npos);

    d = sample();
    d.utterances[3].text = "   ";
    CHECK(violation_of(d).find("empty text") != std::string::npos);

    d = sample();
    d.utterances[1].strategy_id = "question";
    CHECK(violation_of(d).find("strategy on user") != std::string::npos);

    d = sample();
    d.utterances[2].strategy_id = "hypnosis";
    CHECK(violation_of(d).find("unknown strategy") != std::string::npos);

    d = sample();
    d.utterances[2].strategy_id.reset();
    CHECK(violation_of(d).find("no strategy") != std::string::npos);

    d = sample();
    d.path.steps[1] = "question";
    CHECK(violation_of(d).find("mismatch") != std::string::npos);

    d = sample();
    d.situation.problem_ids = {"anxiety", "loneliness", "depression", "insomnia"};
    CHECK_FALSE(violation_of(d).empty());

    d = sample();
    d.situation.cause_ids = {};
    CHECK_FALSE(violation_of(d).empty());

    d = sample();
    d.situation.group_id = "martians";
    CHECK(violation_of(d).find("does not resolve") != std::string::npos);

    d = sample();
    d.source = DialogueSource::generated;
    d.review = ReviewRecord{{{9, ""}}, ReviewOutcome::accepted, {}};
    CHECK(violation_of(d).find("fewer than 10") != std::string::npos);

    d = sample();
    d.review = ReviewRecord{{{8, ""}}, ReviewOutcome::accepted, {}};
    CHECK(violation_of(d).find(">= 9") != std::string::npos);
}

TEST_CASE("serialization round trip") {
    auto d = sample();
    d.source = DialogueSource::generated;
    d.utterances.push_back({Speaker::user, "还有一件事", std::nullopt});
    d.utterances.push_back({Speaker::system, "嗯，我在听。", "restatement"});
    d.utterances.push_back({Speaker::user, "谢谢", std::nullopt});
    d.utterances.push_back({Speaker::system, "不客气", "affirmation"});
    d.path.steps.push_back("restatement");
    d.path.steps.push_back("affirmation");
    d.review = ReviewRecord{{{8, "more detail"}, {9, ""}}, ReviewOutcome::accepted, {}};
    d.severity = SeverityPair{SeverityLevel::severe, SeverityLevel::mild};
    REQUIRE(violation_of(d).empty());
    const auto line = dialogue_to_json(d);
    CHECK(line.find('\n') == std::string::npos);
    CHECK(dialogue_from_json(line) == d);
    CHECK(line.find("还有一件事") != std::string::npos);
}

TEST_CASE("schema errors name the field and line") {
    const auto good = dialogue_to_json(sample());
    auto j = nlohmann::json::parse(good);
    j["utterances"][1]["speaker"] = "therapist";
    try {
        parse_corpus(good + "\n\n" + j.dump() + "\n", cpsdd());
        FAIL("expected SchemaError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SchemaError);
        CHECK(e.line() == 3);
        CHECK(e.detail().find("speaker") != std::string::npos);
    }
    try {
        parse_corpus("{not json", cpsdd());
        FAIL("expected SchemaError");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::SchemaError);
        CHECK(e.line() == 1);
    }
    try {
        parse_corpus(good + "\n" + good, cpsdd());
        FAIL("expected duplicate id");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InvariantViolation);
        CHECK(e.line() == 2);
    }
}

TEST_CASE("write refuses invalid corpora and reads back") {
    TempDir dir;
    auto bad = sample();
    bad.path.steps.clear();
    CHECK_THROWS_AS(write_corpus({sample(), bad}, dir / "c.jsonl", cpsdd()), Error);
    CHECK_FALSE(std::filesystem::exists(dir / "c.jsonl"));
    write_corpus({sample()}, dir / "c.jsonl", cpsdd());
    CHECK(read_corpus(dir / "c.jsonl", cpsdd()) == std::vector<Dialogue>{sample()});
    CHECK(serialize_corpus({sample()}, cpsdd()) == dialogue_to_json(sample()) + "\n");
}

TEST_CASE("statistics on a hand-counted corpus") {
    Dialogue a;
    a.id = "a";
    a.situation = simple_situation(cpsdd());
    a.path.steps = {"question"};
    a.utterances = {{Speaker::system, "你好", std::nullopt},
                    {Speaker::user, "I feel bad", std::nullopt},
                    {Speaker::system, "为什么呢", "question"}};
    Dialogue b = a;
    b.id = "b";
    b.utterances[1].text = "累";
    const auto s = compute_stats({a, b}, TokenMode::mixed, &cpsdd());
    // a: 2 + 3 + 4 tokens; b: 2 + 1 + 4.
    CHECK(s.utterances.total == 6);
    CHECK(s.utterances.system == 4);
    CHECK(s.tokens.system == 12);
    CHECK(s.tokens.user == 4);
    CHECK(s.avg_dialogue_len_total.value() == 3.0);
    CHECK(s.avg_utterance_len_user.value() == 2.0);
    CHECK(s.avg_utterance_len_system == Ratio{12, 4});
    CHECK(s.n_strategies == 9);
    CHECK(s.language == "zh");
    CHECK_THROWS_AS(compute_stats({}, TokenMode::mixed), Error);
    const auto j = nlohmann::json::parse(stats_json(s));
    CHECK(j.at("language") == "zh");
}

TEST_CASE("count humanization") {
    CHECK(humanize_count(999) == "999");
    CHECK(humanize_count(1300) == "1.3K");
    CHECK(humanize_count(700000) == "700.0K");
    CHECK(humanize_count(2400000) == "2.4M");
}

TEST_CASE("stats table columns") {
    std::mt19937_64 rng(3);
    std::vector<Dialogue> ds;
    for (int i = 0; i < 5; ++i) ds.push_back(random_dialogue(rng, "r" + std::to_string(i), cpsdd(), 2, 4));
    const auto table = render_stats_table("demo", compute_stats(ds, TokenMode::mixed, &cpsdd()));
    for (const char* col : {"Size", "Utts. (System/User)", "#Dia.len (System/User)", "#Utt.len (System/User)", "St.s", "Lan."})
        CHECK_MESSAGE(table.find(col) != std::string::npos, col);
    CHECK(table.find("demo") != std::string::npos);
}

TEST_CASE("severity labels") {
    CHECK(parse_severity("Severity: mild") == SeverityLevel::mild);
    CHECK(parse_severity("severity - SEVERE.") == SeverityLevel::severe);
    CHECK(parse_severity("I'd say moderate, maybe mild") == SeverityLevel::moderate);
    CHECK(parse_severity("程度：轻度") == SeverityLevel::mild);
    CHECK(parse_severity("mildly annoyed") == std::nullopt);
    CHECK(parse_severity("no idea") == std::nullopt);
    CHECK(severity_from_string("recovered") == SeverityLevel::recovered);
    CHECK((SeverityPair{SeverityLevel::severe, SeverityLevel::minimal}.relief()) == 3);
}

TEST_CASE("severity judging needs four user turns and re-asks") {
    auto d = sample();
    auto judge = scripted_backend({responder(RoleTag::judger, [](const ChatRequest&) {
        return std::optional<std::string>("Severity: mild");
    })});
    try {
        judge_severity(d, *judge);
        FAIL("expected InsufficientTurns");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::InsufficientTurns);
    }

    d = make_dialogue("d2", cpsdd(), {"question", "comforting", "encouraging", "affirmation"}, simple_situation(cpsdd()));
    auto flaky = scripted_backend({responder(RoleTag::judger, [](const ChatRequest& r) -> std::optional<std::string> {
        if (r.request_id.ends_with("/a0")) return "hmm";
        return r.request_id.find("before") != std::string::npos ? "Severity: severe" : "Severity: minimal";
    })});
    const auto pair = judge_severity(d, *flaky);
    CHECK(pair.before == SeverityLevel::severe);
    CHECK(pair.after == SeverityLevel::minimal);
    CHECK(flaky->served_count() == 4);

    auto hopeless = scripted_backend({responder(RoleTag::judger, [](const ChatRequest&) {
        return std::optional<std::string>("cannot tell");
    })});
    try {
        judge_severity(d, *hopeless, SeverityOptions{1});
        FAIL("expected UnparseableJudgment");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::UnparseableJudgment);
        CHECK(e.detail() == "cannot tell");
    }
    CHECK(hopeless->served_count() == 2);
}

TEST_CASE("relief histogram") {
    auto d1 = sample();
    d1.severity = SeverityPair{SeverityLevel::severe, SeverityLevel::mild};
    auto d2 = sample();
    d2.severity = SeverityPair{SeverityLevel::mild, SeverityLevel::mild};
    auto d3 = sample();
    d3.severity = SeverityPair{SeverityLevel::moderate, SeverityLevel::recovered};
    const auto h = relief_histogram({d1, d2, d3});
    CHECK(h == std::map<int, std::size_t>{{0, 1}, {2, 1}, {3, 1}});
    CHECK(fraction_relieved(h, 2) == doctest::Approx(2.0 / 3.0));
    CHECK(fraction_relieved({}, 2) == 0.0);
    CHECK_THROWS_AS(relief_histogram({sample()}), Error);
}

}
