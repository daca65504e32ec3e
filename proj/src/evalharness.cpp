#include "esckit/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include <json.hpp>

#include "esckit/error.hpp"
#include "esckit/text.hpp"

namespace esckit {

using ojson = nlohmann::ordered_json;

std::string Instance::id() const { return dialogue_id + "#" + std::to_string(turn_index); }

std::vector<Instance> extract_instances(const Dialogue& d) {
    std::vector<Instance> out;
    for (std::size_t i = 1; i < d.utterances.size(); ++i) {
        const auto& u = d.utterances[i];
        if (u.speaker != Speaker::system) continue;
        Instance inst;
        inst.dialogue_id = d.id;
        inst.turn_index = i;
        inst.history.assign(d.utterances.begin() + 1, d.utterances.begin() + static_cast<std::ptrdiff_t>(i));
        inst.gold_strategy = u.strategy_id.value_or("");
        inst.gold_response = u.text;
        inst.situation = d.situation;
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<Instance> extract_instances(const std::vector<Dialogue>& dialogues) {
    std::vector<Instance> out;
    for (const auto& d : dialogues) {
        auto more = extract_instances(d);
        out.insert(out.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
    }
    return out;
}

std::string instance_json(const Instance& inst) {
    ojson history = ojson::array();
    for (const auto& u : inst.history) {
        ojson ju{{"speaker", to_string(u.speaker)}, {"text", u.text}};
        if (u.strategy_id) ju["strategy"] = *u.strategy_id;
        history.push_back(std::move(ju));
    }
    ojson j{{"id", inst.id()},
            {"dialogue_id", inst.dialogue_id},
            {"turn_index", inst.turn_index},
            {"situation",
             {{"group", inst.situation.group_id},
              {"problems", inst.situation.problem_ids},
              {"causes", inst.situation.cause_ids},
              {"focuses", inst.situation.focus_ids}}},
            {"history", std::move(history)},
            {"gold_strategy", inst.gold_strategy},
            {"gold_response", inst.gold_response}};
    return j.dump();
}

Instance instance_from_json(std::string_view line) {
    try {
        const auto j = ojson::parse(line.begin(), line.end());
        Instance inst;
        inst.dialogue_id = j.at("dialogue_id").get<std::string>();
        inst.turn_index = j.at("turn_index").get<std::size_t>();
        const auto& s = j.at("situation");
        inst.situation = {s.at("group").get<std::string>(), s.at("problems").get<std::vector<std::string>>(),
                          s.at("causes").get<std::vector<std::string>>(), s.at("focuses").get<std::vector<std::string>>()};
        for (const auto& ju : j.at("history")) {
            Utterance u;
            const auto speaker = ju.at("speaker").get<std::string>();
            if (speaker != "system" && speaker != "user") throw Error(ErrorCode::SchemaError, "history[].speaker");
            u.speaker = speaker == "system" ? Speaker::system : Speaker::user;
            u.text = ju.at("text").get<std::string>();
            if (ju.contains("strategy")) u.strategy_id = ju.at("strategy").get<std::string>();
            inst.history.push_back(std::move(u));
        }
        inst.gold_strategy = j.at("gold_strategy").get<std::string>();
        inst.gold_response = j.at("gold_response").get<std::string>();
        return inst;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaError, e.what());
    }
}

// --- Splits ---------------------------------------------------------------------------------

std::string_view to_string(SplitName name) {
    switch (name) {
        case SplitName::train: return "train";
        case SplitName::dev: return "dev";
        case SplitName::test: return "test";
    }
    return "?";
}

std::string_view to_string(SplitMode mode) { return mode == SplitMode::by_dialogue ? "by_dialogue" : "by_instance"; }

SplitName split_name_from_string(std::string_view name) {
    for (auto s : {SplitName::train, SplitName::dev, SplitName::test})
        if (to_string(s) == name) return s;
    throw Error(ErrorCode::BadConfig, "unknown split " + std::string(name));
}

SplitMode split_mode_from_string(std::string_view name) {
    for (auto m : {SplitMode::by_dialogue, SplitMode::by_instance})
        if (to_string(m) == name) return m;
    throw Error(ErrorCode::BadConfig, "unknown split mode " + std::string(name));
}

std::vector<std::string> SplitAssignment::ids(SplitName name) const {
    std::vector<std::string> out;
    for (const auto& [id, s] : assignment)
        if (s == name) out.push_back(id);
    return out;
}

std::size_t SplitAssignment::count(SplitName name) const {
    return static_cast<std::size_t>(
        std::count_if(assignment.begin(), assignment.end(), [&](const auto& kv) { return kv.second == name; }));
}

SplitAssignment split_ids(std::vector<std::string> ids, std::uint64_t seed, SplitMode mode, SplitRatios ratios) {
    if (ids.size() < 10) throw Error(ErrorCode::TooFewItems, std::to_string(ids.size()) + " items, need at least 10");
    const unsigned total = ratios.train + ratios.dev + ratios.test;
    if (total == 0) throw Error(ErrorCode::BadConfig, "split ratios sum to zero");
    std::sort(ids.begin(), ids.end());
    if (auto dup = std::adjacent_find(ids.begin(), ids.end()); dup != ids.end())
        throw Error(ErrorCode::DuplicateId, *dup);
    std::mt19937_64 rng(seed);
    // Explicit Fisher-Yates so the order does not depend on the library's shuffle.
    for (std::size_t i = ids.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(ids[i - 1], ids[pick(rng)]);
    }
    const std::size_t n = ids.size();
    const std::size_t n_dev = n * ratios.dev / total;
    const std::size_t n_test = n * ratios.test / total;
    SplitAssignment out;
    out.mode = mode;
    out.seed = seed;
    out.ratios = ratios;
    for (std::size_t i = 0; i < n; ++i) {
        const auto name = i < n_dev ? SplitName::dev : i < n_dev + n_test ? SplitName::test : SplitName::train;
        out.assignment.emplace(ids[i], name);
    }
    return out;
}

SplitAssignment split(const std::vector<Dialogue>& dialogues, std::uint64_t seed, SplitMode mode, SplitRatios ratios) {
    std::vector<std::string> ids;
    if (mode == SplitMode::by_dialogue) {
        for (const auto& d : dialogues) ids.push_back(d.id);
    } else {
        for (const auto& inst : extract_instances(dialogues)) ids.push_back(inst.id());
    }
    return split_ids(std::move(ids), seed, mode, ratios);
}

std::vector<Instance> select_instances(const std::vector<Dialogue>& dialogues, const SplitAssignment& assignment,
                                       SplitName name) {
    std::vector<Instance> out;
    for (auto& inst : extract_instances(dialogues)) {
        const auto key = assignment.mode == SplitMode::by_dialogue ? inst.dialogue_id : inst.id();
        auto it = assignment.assignment.find(key);
        if (it != assignment.assignment.end() && it->second == name) out.push_back(std::move(inst));
    }
    return out;
}

std::string split_json(const SplitAssignment& a) {
    ojson assignment = ojson::object();
    for (const auto& [id, s] : a.assignment) assignment[id] = to_string(s);
    ojson j{{"mode", to_string(a.mode)},
            {"seed", a.seed},
            {"ratios", {a.ratios.train, a.ratios.dev, a.ratios.test}},
            {"counts",
             {{"train", a.count(SplitName::train)}, {"dev", a.count(SplitName::dev)}, {"test", a.count(SplitName::test)}}},
            {"assignment", std::move(assignment)}};
    return j.dump(2);
}

SplitAssignment split_from_json(std::string_view document) {
    try {
        const auto j = ojson::parse(document.begin(), document.end());
        SplitAssignment a;
        a.mode = split_mode_from_string(j.at("mode").get<std::string>());
        a.seed = j.at("seed").get<std::uint64_t>();
        const auto r = j.at("ratios").get<std::vector<unsigned>>();
        if (r.size() != 3) throw Error(ErrorCode::SchemaError, "ratios");
        a.ratios = {r[0], r[1], r[2]};
        for (const auto& [id, s] : j.at("assignment").items()) a.assignment[id] = split_name_from_string(s.get<std::string>());
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaError, e.what());
    }
}

// --- Predictions -----------------------------------------------------------------------------

std::string prediction_json(const Prediction& p) {
    ojson j{{"id", p.instance_id},
            {"strategy", p.strategy ? ojson(*p.strategy) : ojson(nullptr)},
            {"text", p.text},
            {"gold_strategy", p.gold_strategy},
            {"gold_response", p.gold_response}};
    if (p.failed) {
        j["failed"] = true;
        j["error"] = p.error;
    }
    return j.dump();
}

Prediction prediction_from_json(std::string_view line) {
    try {
        const auto j = ojson::parse(line.begin(), line.end());
        Prediction p;
        p.instance_id = j.at("id").get<std::string>();
        if (!j.at("strategy").is_null()) p.strategy = j.at("strategy").get<std::string>();
        p.text = j.at("text").get<std::string>();
        p.gold_strategy = j.at("gold_strategy").get<std::string>();
        p.gold_response = j.at("gold_response").get<std::string>();
        p.failed = j.value("failed", false);
        p.error = j.value("error", std::string{});
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::SchemaError, e.what());
    }
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::vector<Prediction> out;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(prediction_from_json(line));
        } catch (const Error& e) {
            throw Error(e.code(), e.detail(), line_no);
        }
    }
    return out;
}

void write_predictions(const std::vector<Prediction>& predictions, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    for (const auto& p : predictions) out << prediction_json(p) << '\n';
}

// --- Evaluation ---------------------------------------------------------------------------------

MetricReport score_predictions(const std::vector<Prediction>& predictions, bool with_acc, const MetricConfig& config,
                               const std::string& label) {
    std::vector<ScoredPair> pairs;
    std::vector<std::string> predicted, gold;
    std::size_t failed = 0;
    for (const auto& p : predictions) {
        if (p.failed) {
            ++failed;
            continue;
        }
        pairs.push_back({p.text, p.gold_response});
        predicted.push_back(p.strategy.value_or(""));
        gold.push_back(p.gold_strategy);
    }
    if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "no successful predictions to score");
    auto report = score_corpus(pairs, config, with_acc ? &predicted : nullptr, with_acc ? &gold : nullptr);
    report.label = label;
    report.n_failed = failed;
    return report;
}

EvalResult evaluate(const Engine& engine, const std::vector<Instance>& instances, const EvalConfig& config) {
    if (instances.empty()) throw Error(ErrorCode::EmptyInput, "no test instances");
    if (config.workers == 0) throw Error(ErrorCode::BadConfig, "workers must be >= 1");
    std::vector<Prediction> predictions(instances.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const auto i = next.fetch_add(1);
            if (i >= instances.size()) return;
            const auto& inst = instances[i];
            auto& p = predictions[i];
            p.instance_id = inst.id();
            p.gold_strategy = inst.gold_strategy;
            p.gold_response = inst.gold_response;
            try {
                SessionState state;
                state.session_id = inst.id();
                state.transcript = inst.history;
                state.ablation = config.ablation;
                const auto result = engine.respond(state, config.oracle_profile ? &inst.situation : nullptr);
                p.strategy = result.reply.strategy_id;
                p.text = result.reply.text;
            } catch (const std::exception& e) {
                p.failed = true;
                p.error = e.what();
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 1; w < std::min(config.workers, instances.size()); ++w) pool.emplace_back(worker);
        worker();
    }
    const auto failed = static_cast<std::size_t>(
        std::count_if(predictions.begin(), predictions.end(), [](const Prediction& p) { return p.failed; }));
    if (static_cast<double>(failed) > config.max_failure_rate * static_cast<double>(instances.size())) {
        std::string first_error;
        for (const auto& p : predictions)
            if (p.failed) {
                first_error = p.error;
                break;
            }
        throw Error(ErrorCode::FailureRateExceeded, std::to_string(failed) + " of " + std::to_string(instances.size()) +
                                                        " instances failed; first: " + first_error);
    }
    EvalResult result;
    result.ablation = config.ablation;
    const bool with_acc = !config.ablation.count(Agent::planner);
    result.report = score_predictions(predictions, with_acc, config.metrics,
                                      config.label.empty() ? ablation_label(config.ablation) : config.label);
    result.predictions = std::move(predictions);
    return result;
}

std::vector<EvalResult> ablation_matrix(const Engine& engine, const std::vector<Instance>& instances,
                                        const EvalConfig& config) {
    std::vector<EvalResult> out;
    for (const auto& ablation : table_ablations()) {
        EvalConfig row = config;
        row.ablation = ablation;
        row.label = ablation_label(ablation);
        out.push_back(evaluate(engine, instances, row));
    }
    return out;
}

}  // namespace esckit
