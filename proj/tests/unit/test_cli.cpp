#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "esckit/corpus.hpp"
#include "fixtures.hpp"

using namespace esckit;
using namespace fixtures;
using json = nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Run run(const TempDir& dir, const std::string& args) {
    const auto err = dir / "stderr.txt";
    const std::string cmd = std::string("'") + ESCKIT_CLI_PATH + "' " + args + " 2>'" + err.string() + "'";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe);
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = slurp(err);
    return r;
}

void write_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

std::string corpus_file(const TempDir& dir, std::size_t n) {
    std::mt19937_64 rng(8);
    std::vector<Dialogue> ds;
    for (std::size_t i = 0; i < n; ++i) ds.push_back(random_dialogue(rng, "c" + std::to_string(i), cpsdd(), 4, 6));
    write_corpus(ds, dir / "corpus.jsonl", cpsdd());
    return (dir / "corpus.jsonl").string();
}

const char* kAgents = R"({
  "backends": {"s": {"type": "scripted", "script": [
    {"role": "summarizer", "reply": "Summary: the client is worried", "repeat": true},
    {"role": "planner", "reply": "Question", "repeat": true},
    {"role": "profiler", "reply": "Group: Parents", "repeat": true},
    {"role": "supporter", "reply": "tell me more", "repeat": true},
    {"role": "plausibility_judge", "reply": "no\nRationale: odd", "repeat": true},
    {"role": "generator", "reply": "Question, Comforting", "repeat": true},
    {"role": "judger", "reply": "Severity: mild", "repeat": true}]}},
  "roles": {"summarizer": "s", "planner": "s", "profiler": "s", "supporter": "s", "generator": "s",
            "modifier": "s", "reviewer": "s", "judger": "s"},
  "plausibility_judges": ["s"]
})";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("stats prints the table and JSON") {
    TempDir dir;
    const auto corpus = corpus_file(dir, 12);
    auto r = run(dir, "stats '" + corpus + "' --name demo");
    CHECK(r.code == 0);
    CHECK(r.out.find("St.s") != std::string::npos);
    CHECK(r.out.find("demo") != std::string::npos);
    r = run(dir, "stats '" + corpus + "' --json");
    CHECK(r.code == 0);
    CHECK(json::parse(r.out).at("language") == "zh");
}

TEST_CASE("extract and split") {
    TempDir dir;
    const auto corpus = corpus_file(dir, 12);
    auto r = run(dir, "extract '" + corpus + "'");
    CHECK(r.code == 0);
    std::size_t lines = 0;
    for (char c : r.out) lines += c == '\n';
    std::size_t expected = 0;
    for (const auto& d : read_corpus(corpus, cpsdd())) expected += d.count(Speaker::system) - 1;
    CHECK(lines == expected);

    r = run(dir, "split '" + corpus + "' --seed 3 --out '" + (dir / "split.json").string() + "'");
    CHECK(r.code == 0);
    const auto j = json::parse(slurp(dir / "split.json"));
    CHECK(j.dump().find("c0") != std::string::npos);
    CHECK(run(dir, "split '" + corpus + "' --seed 3").out == slurp(dir / "split.json"));
}

TEST_CASE("eval with scripted bindings, then rescore") {
    TempDir dir;
    const auto corpus = corpus_file(dir, 12);
    write_file(dir / "b.json", kAgents);
    const auto b = (dir / "b.json").string();
    run(dir, "split '" + corpus + "' --seed 1 --out '" + (dir / "split.json").string() + "'");
    auto r = run(dir, "--backends '" + b + "' eval '" + corpus + "' --split '" + (dir / "split.json").string() +
                          "' --out '" + (dir / "r.json").string() + "' --predictions '" + (dir / "p.jsonl").string() + "'");
    CHECK_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("B-1") != std::string::npos);
    const auto report = slurp(dir / "r.json");
    CHECK(report.find("\"acc\"") != std::string::npos);

    r = run(dir, "eval --rescore '" + (dir / "p.jsonl").string() + "'");
    CHECK(r.code == 0);
    CHECK(r.out.find("full") != std::string::npos);

    r = run(dir, "--backends '" + b + "' eval '" + corpus + "' --matrix");
    CHECK(r.code == 0);
    CHECK(r.out.find("w/o all") != std::string::npos);
    r = run(dir, "--backends '" + b + "' eval '" + corpus + "' --matrix --predictions '" + (dir / "q.jsonl").string() + "'");
    CHECK(r.code == 2);
}

TEST_CASE("synthesize reports the funnel when every situation is rejected") {
    TempDir dir;
    write_corpus(seed_corpus(cpsdd(), 3), dir / "seeds.jsonl", cpsdd());
    write_file(dir / "b.json", kAgents);
    const auto r = run(dir, "--backends '" + (dir / "b.json").string() + "' synthesize --seed-corpus '" +
                                (dir / "seeds.jsonl").string() + "' --n 5 --out '" + (dir / "out.jsonl").string() +
                                "' --funnel '" + (dir / "f.json").string() + "' --rejects '" +
                                (dir / "rej.jsonl").string() + "'");
    CHECK_MESSAGE(r.code == 0, r.err);
    const auto f = json::parse(slurp(dir / "f.json"));
    CHECK(f.at("sampled") == 5);
    CHECK(f.at("plausible") == 0);
    CHECK(read_corpus(dir / "out.jsonl", cpsdd()).size() == 3);
    CHECK(slurp(dir / "rej.jsonl").find("plausibility") != std::string::npos);
}

TEST_CASE("errors exit with code 2 and a message") {
    TempDir dir;
    auto r = run(dir, "stats '" + (dir / "missing.jsonl").string() + "'");
    CHECK(r.code == 2);
    CHECK(r.err.find("esckit:") != std::string::npos);
    write_file(dir / "bad.jsonl", "{oops\n");
    r = run(dir, "stats '" + (dir / "bad.jsonl").string() + "'");
    CHECK(r.code == 2);
    const auto corpus = corpus_file(dir, 12);
    r = run(dir, "eval '" + corpus + "'");
    CHECK(r.code == 2);
    CHECK(r.err.find("backends") != std::string::npos);
}

}
