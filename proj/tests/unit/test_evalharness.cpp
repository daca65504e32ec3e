#include <doctest.h>

#include <random>
#include <set>

#include "esckit/evalharness.hpp"
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

std::vector<std::string> numbered(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back("id" + std::to_string(i));
    return out;
}

std::shared_ptr<ScriptedBackend> parrot() {
    return scripted_backend({responder(std::nullopt, [](const ChatRequest& q) -> std::optional<std::string> {
        switch (q.role) {
            case RoleTag::summarizer: return "Summary: fine";
            case RoleTag::planner: return "Question";
            case RoleTag::profiler: return "Group: Parents";
            default: return "ok then";
        }
    })});
}

}  // namespace

TEST_SUITE("evalharness") {

TEST_CASE("instances skip the greeting and carry gold labels") {
    const auto d = make_dialogue("d", cpsdd(), {"question", "comforting"}, simple_situation(cpsdd()));
    const auto inst = extract_instances(d);
    REQUIRE(inst.size() == 2);
    CHECK(inst[0].id() == "d#2");
    CHECK(inst[0].history.size() == 1);
    CHECK(inst[0].gold_strategy == "question");
    CHECK(inst[1].gold_response == "d system 2");
    CHECK(inst[1].history.back().text == "d user 2");
    CHECK(instance_from_json(instance_json(inst[1])) == inst[1]);
}

TEST_CASE("split sizes and errors") {
    const auto a = split_ids(numbered(23), 1, SplitMode::by_dialogue);
    // dev and test get floor(23 / 10) = 2 each.
    CHECK(a.count(SplitName::dev) == 2);
    CHECK(a.count(SplitName::test) == 2);
    CHECK(a.count(SplitName::train) == 19);
    CHECK(code_of([] { split_ids(numbered(9), 1, SplitMode::by_dialogue); }) == ErrorCode::TooFewItems);
    auto dup = numbered(12);
    dup.push_back("id3");
    CHECK(code_of([&] { split_ids(dup, 1, SplitMode::by_dialogue); }) == ErrorCode::DuplicateId);

    const auto b = split_ids(numbered(30), 1, SplitMode::by_dialogue, {3, 1, 1});
    CHECK(b.count(SplitName::dev) == 6);
    CHECK(b.count(SplitName::train) == 18);
}

TEST_CASE("split is a pure function of ids and seed") {
    auto ids = numbered(40);
    const auto a = split_ids(ids, 5, SplitMode::by_dialogue);
    std::shuffle(ids.begin(), ids.end(), std::mt19937_64(11));
    CHECK(split_ids(ids, 5, SplitMode::by_dialogue).assignment == a.assignment);
    CHECK(split_ids(ids, 6, SplitMode::by_dialogue).assignment != a.assignment);
    const auto back = split_from_json(split_json(a));
    CHECK(back.assignment == a.assignment);
    CHECK(back.seed == 5);
    CHECK(back.mode == SplitMode::by_dialogue);
}

TEST_CASE("by-instance mode assigns turns independently") {
    std::vector<Dialogue> ds;
    for (int i = 0; i < 4; ++i)
        ds.push_back(make_dialogue("d" + std::to_string(i), cpsdd(), {"question", "comforting", "encouraging"},
                                   simple_situation(cpsdd())));
    const auto a = split(ds, 3, SplitMode::by_instance);
    CHECK(a.assignment.size() == 12);
    CHECK(a.assignment.count("d0#2") == 1);
    std::size_t total = 0;
    for (auto n : {SplitName::train, SplitName::dev, SplitName::test}) total += select_instances(ds, a, n).size();
    CHECK(total == 12);
    CHECK(split_mode_from_string("by_instance") == SplitMode::by_instance);
    CHECK(code_of([] { split_name_from_string("holdout"); }) != ErrorCode::IoError);
}

TEST_CASE("prediction files round trip") {
    TempDir dir;
    std::vector<Prediction> ps = {{"d#2", "question", "你好吗", "question", "嗯", false, ""},
                                  {"d#4", std::nullopt, "", "comforting", "ok", true, "supporter: Unavailable"}};
    write_predictions(ps, dir / "p.jsonl");
    CHECK(read_predictions(dir / "p.jsonl") == ps);
    CHECK(prediction_from_json(prediction_json(ps[1])) == ps[1]);
}

TEST_CASE("rescoring excludes failures") {
    std::vector<Prediction> ps = {{"a#2", "question", "a b", "question", "a b", false, ""},
                                  {"a#4", "comforting", "x", "question", "y", false, ""},
                                  {"a#6", std::nullopt, "", "question", "z", true, "boom"}};
    const auto r = score_predictions(ps, true, {}, "row");
    CHECK(r.n_instances == 2);
    CHECK(r.n_failed == 1);
    CHECK(*r.acc == 50.0);
    CHECK(r.label == "row");
    CHECK_FALSE(score_predictions(ps, false, {}, "row").acc);
    CHECK(code_of([&] { score_predictions({ps[2]}, true, {}, "row"); }) == ErrorCode::EmptyInput);
}

TEST_CASE("evaluation enforces the failure bound") {
    std::vector<Dialogue> ds;
    for (int i = 0; i < 3; ++i)
        ds.push_back(make_dialogue("d" + std::to_string(i), cpsdd(), {"question", "comforting"}, simple_situation(cpsdd())));
    const auto instances = extract_instances(ds);
    auto failing = scripted_backend({responder(std::nullopt, [](const ChatRequest& q) -> std::optional<std::string> {
        if (q.role == RoleTag::supporter && q.request_id.rfind("d1#", 0) == 0) throw Error(ErrorCode::Timeout, "slow");
        if (q.role == RoleTag::summarizer) return "Summary: fine";
        if (q.role == RoleTag::planner) return "Question";
        return "ok";
    })});
    const Engine engine(cpsdd(), uniform_bindings(failing));
    EvalConfig cfg;
    try {
        evaluate(engine, instances, cfg);
        FAIL("expected FailureRateExceeded");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::FailureRateExceeded);
        CHECK(e.detail().rfind("2 of 6", 0) == 0);
    }
    cfg.max_failure_rate = 0.5;
    const auto r = evaluate(engine, instances, cfg);
    CHECK(r.report.n_failed == 2);
    CHECK(r.report.n_instances == 4);
    CHECK(code_of([&] { evaluate(engine, {}, cfg); }) == ErrorCode::EmptyInput);
}

TEST_CASE("parallel evaluation matches serial") {
    std::mt19937_64 rng(4);
    std::vector<Dialogue> ds;
    for (int i = 0; i < 6; ++i) ds.push_back(random_dialogue(rng, "r" + std::to_string(i), cpsdd(), 2, 5));
    const auto instances = extract_instances(ds);
    const Engine engine(cpsdd(), uniform_bindings(parrot()));
    EvalConfig cfg;
    const auto serial = evaluate(engine, instances, cfg);
    cfg.workers = 4;
    const auto parallel = evaluate(engine, instances, cfg);
    CHECK(serial.predictions == parallel.predictions);
    CHECK(serial.report.label == "full");
}

}
