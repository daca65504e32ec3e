// esckit command-line tool.

#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "esckit/backend.hpp"
#include "esckit/corpus.hpp"
#include "esckit/engine.hpp"
#include "esckit/error.hpp"
#include "esckit/evalharness.hpp"
#include "esckit/metrics.hpp"
#include "esckit/prompts.hpp"
#include "esckit/service.hpp"
#include "esckit/synthesis.hpp"
#include "esckit/taxonomy.hpp"

using namespace esckit;

namespace {

struct Globals {
    std::string config;
    std::string taxonomy;
    std::string backends;
    std::string prompts;
    std::string request_log;
};

// Settings file: {"taxonomy", "backends", "prompts", "request_log",
//                 "engine": {"profiler_every", "history_window", "max_reasks", "default_strategy"}}
struct Settings {
    Globals g;
    EngineConfig engine;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

Settings resolve_settings(const Globals& cli) {
    Settings s;
    if (!cli.config.empty()) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(cli.config));
        } catch (const nlohmann::json::parse_error& e) {
            throw Error(ErrorCode::ParseError, cli.config + ": " + e.what());
        }
        const auto base = std::filesystem::path(cli.config).parent_path();
        auto rel = [&](const std::string& p) {
            return p.empty() || std::filesystem::path(p).is_absolute() ? p : (base / p).string();
        };
        s.g.taxonomy = j.value("taxonomy", std::string{});
        if (!s.g.taxonomy.empty() && s.g.taxonomy.find('.') != std::string::npos) s.g.taxonomy = rel(s.g.taxonomy);
        s.g.backends = rel(j.value("backends", std::string{}));
        s.g.prompts = rel(j.value("prompts", std::string{}));
        s.g.request_log = rel(j.value("request_log", std::string{}));
        if (j.contains("engine")) {
            const auto& e = j["engine"];
            s.engine.profiler_every = e.value("profiler_every", s.engine.profiler_every);
            s.engine.history_window = e.value("history_window", s.engine.history_window);
            s.engine.max_reasks = e.value("max_reasks", s.engine.max_reasks);
            s.engine.default_strategy = e.value("default_strategy", s.engine.default_strategy);
        }
    }
    if (!cli.taxonomy.empty()) s.g.taxonomy = cli.taxonomy;
    if (!cli.backends.empty()) s.g.backends = cli.backends;
    if (!cli.prompts.empty()) s.g.prompts = cli.prompts;
    if (!cli.request_log.empty()) s.g.request_log = cli.request_log;
    if (s.g.taxonomy.empty()) s.g.taxonomy = "cpsdd";
    return s;
}

struct Context {
    Settings settings;
    LabelSet taxonomy;
    PromptLibrary prompts = PromptLibrary::builtin();
    std::unique_ptr<std::ofstream> log_file;
    std::shared_ptr<RequestLog> log;

    explicit Context(const Globals& g) : settings(resolve_settings(g)) {
        taxonomy = resolve_taxonomy(settings.g.taxonomy);
        if (!settings.g.prompts.empty()) prompts = PromptLibrary::with_overrides(settings.g.prompts);
        if (!settings.g.request_log.empty()) {
            log_file = std::make_unique<std::ofstream>(settings.g.request_log, std::ios::app);
            log = std::make_shared<RequestLog>(*log_file);
        }
    }

    BackendBindings bindings() const {
        if (settings.g.backends.empty())
            throw Error(ErrorCode::BadConfig, "backends: pass --backends <bindings.json> or set it in --config");
        return load_bindings(settings.g.backends, log);
    }
};

void write_text(const std::string& path, const std::string& contents) {
    if (path.empty() || path == "-") {
        std::cout << contents;
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
    out << contents;
}

std::string format_turn(const Utterance& u, const LabelSet& taxonomy) {
    if (u.speaker == Speaker::user) return "User: " + u.text;
    if (!u.strategy_id) return "System: " + u.text;
    const auto* s = taxonomy.find_strategy(*u.strategy_id);
    return "System [" + (s ? s->name : *u.strategy_id) + "]: " + u.text;
}

HttpServer* g_server = nullptr;

void on_signal(int) {
    if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Strategy-guided emotional support dialogue toolkit"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Settings file (JSON)");
    app.add_option("--taxonomy", g.taxonomy, "Taxonomy profile name or JSON file (default: cpsdd)");
    app.add_option("--backends", g.backends, "Backend bindings file (JSON)");
    app.add_option("--prompts", g.prompts, "Directory of prompt template overrides");
    app.add_option("--request-log", g.request_log, "Append backend request metadata to this file");

    // serve
    auto* serve = app.add_subcommand("serve", "Run the HTTP chat service");
    ServerOptions server_opts;
    std::string store;
    std::vector<std::string> extra_profiles;
    serve->add_option("--port", server_opts.port, "Port (0 picks a free one)")->capture_default_str();
    serve->add_option("--host", server_opts.host, "Bind address")->capture_default_str();
    serve->add_option("--store", store, "Session event log (JSONL); omitted keeps sessions in memory");
    serve->add_option("--static", server_opts.static_dir, "Serve the browser client from this directory");
    serve->add_option("--profile", extra_profiles, "Additional taxonomy profiles to offer");

    // chat
    auto* chat = app.add_subcommand("chat", "Terminal chat driving the engine");
    std::vector<std::string> chat_ablate;
    bool chat_debug = false;
    chat->add_option("--ablate", chat_ablate, "Agents to disable: profiler, summarizer, planner");
    chat->add_flag("--debug", chat_debug, "Print profile, summary and strategy after each reply");

    // synthesize
    auto* synth = app.add_subcommand("synthesize", "Build a dialogue corpus from seed dialogues");
    std::string seed_corpus, synth_out, checkpoint, rejects_out, funnel_out;
    FactoryConfig factory;
    synth->add_option("--seed-corpus", seed_corpus, "Seed dialogues (JSONL)")->required();
    synth->add_option("--n", factory.n_situations, "Number of situations to sample")->capture_default_str();
    synth->add_option("--seed", factory.seed, "Sampling seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output corpus (JSONL)")->required();
    synth->add_option("--checkpoint", checkpoint, "Checkpoint file for resumable runs");
    synth->add_option("--rejects", rejects_out, "Reject log (JSONL)");
    synth->add_option("--funnel", funnel_out, "Funnel report (JSON); default prints to stderr");
    synth->add_option("--workers", factory.workers, "Parallel workers")->capture_default_str();
    synth->add_option("--max-rounds", factory.review.max_rounds, "Review rounds before giving up")->capture_default_str();
    synth->add_option("--min-steps", factory.path.min_steps, "Shortest dialogue path")->capture_default_str();
    synth->add_option("--max-steps", factory.path.max_steps, "Longest dialogue path")->capture_default_str();
    bool majority = false;
    synth->add_flag("--majority", majority, "Keep situations approved by a majority of judges instead of all");

    // stats
    auto* stats = app.add_subcommand("stats", "Corpus statistics table");
    std::string stats_corpus, stats_name, token_mode = "mixed";
    bool stats_as_json = false;
    stats->add_option("corpus", stats_corpus, "Corpus (JSONL)")->required();
    stats->add_option("--name", stats_name, "Dataset name in the table");
    stats->add_option("--token-mode", token_mode, "char_cjk | whitespace_latin | mixed")->capture_default_str();
    stats->add_flag("--json", stats_as_json, "Machine-readable output");

    // judge-severity
    auto* severity = app.add_subcommand("judge-severity", "Before/after severity judgments and relief histogram");
    std::string sev_corpus, sev_out;
    severity->add_option("corpus", sev_corpus, "Corpus (JSONL)")->required();
    severity->add_option("--out", sev_out, "Write the corpus with severity pairs attached");

    // extract
    auto* extract = app.add_subcommand("extract", "One instance per system turn after the greeting");
    std::string ext_corpus, ext_out;
    extract->add_option("corpus", ext_corpus, "Corpus (JSONL)")->required();
    extract->add_option("--out", ext_out, "Instances (JSONL); default stdout");

    // split
    auto* split_cmd = app.add_subcommand("split", "Train/dev/test assignment (8:1:1)");
    std::string split_corpus, split_out, split_mode = "by_dialogue";
    std::uint64_t split_seed = 42;
    split_cmd->add_option("corpus", split_corpus, "Corpus (JSONL)")->required();
    split_cmd->add_option("--mode", split_mode, "by_dialogue | by_instance")->capture_default_str();
    split_cmd->add_option("--seed", split_seed, "Shuffle seed")->capture_default_str();
    split_cmd->add_option("--out", split_out, "Assignment (JSON); default stdout");

    // eval
    auto* eval = app.add_subcommand("eval", "Strategy prediction and response generation metrics");
    std::string eval_corpus, eval_split, eval_which = "test", eval_out, predictions_out, rescore;
    std::vector<std::string> eval_ablate;
    bool matrix = false, no_oracle = false;
    EvalConfig eval_cfg;
    std::string eval_token_mode = "mixed";
    eval->add_option("corpus", eval_corpus, "Corpus (JSONL)");
    eval->add_option("--split", eval_split, "Assignment file from `split`; default evaluates every instance");
    eval->add_option("--which", eval_which, "train | dev | test")->capture_default_str();
    eval->add_option("--ablate", eval_ablate, "Agents to disable");
    eval->add_flag("--matrix", matrix, "Run all eight ablation rows");
    eval->add_flag("--no-oracle-profile", no_oracle, "Call the profiler instead of using the annotated situation");
    eval->add_option("--workers", eval_cfg.workers, "Parallel instances")->capture_default_str();
    eval->add_option("--max-failure-rate", eval_cfg.max_failure_rate, "Abort above this failure fraction")
        ->capture_default_str();
    eval->add_option("--token-mode", eval_token_mode, "char_cjk | whitespace_latin | mixed")->capture_default_str();
    eval->add_option("--out", eval_out, "Report (JSON)");
    eval->add_option("--predictions", predictions_out, "Save predictions (JSONL)");
    eval->add_option("--rescore", rescore, "Score a saved predictions file instead of running the engine");

    CLI11_PARSE(app, argc, argv);

    try {
        Context ctx(g);

        if (*serve) {
            ServiceOptions opts;
            opts.taxonomies.push_back(ctx.taxonomy);
            for (const auto& p : extra_profiles) opts.taxonomies.push_back(resolve_taxonomy(p));
            opts.bindings = ctx.bindings();
            opts.engine = ctx.settings.engine;
            opts.prompts = ctx.prompts;
            opts.store = store;
            ChatService service(std::move(opts));
            HttpServer server(service, server_opts);
            g_server = &server;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << "serving on " << server_opts.host << ":" << server_opts.port << "\n";
            server.run();
            return 0;
        }

        if (*chat) {
            Engine engine(ctx.taxonomy, ctx.bindings(), ctx.settings.engine, ctx.prompts);
            auto state = new_session("cli", ctx.taxonomy, parse_ablation(chat_ablate));
            std::cout << format_turn(state.transcript.front(), ctx.taxonomy) << "\n";
            std::string line;
            while (std::cout << "> " << std::flush, std::getline(std::cin, line)) {
                if (line == "/quit" || line == "/exit") break;
                if (line.find_first_not_of(" \t") == std::string::npos) continue;
                try {
                    const auto result = engine.step(state, line);
                    std::cout << format_turn(result.reply, ctx.taxonomy) << "\n";
                    if (chat_debug) std::cout << "  " << debug_json(result.debug) << "\n";
                } catch (const Error& e) {
                    std::cout << "(no reply: " << e.what() << ")\n";
                }
            }
            return 0;
        }

        if (*synth) {
            const auto seeds = read_corpus(seed_corpus, ctx.taxonomy);
            factory.checkpoint = checkpoint;
            if (majority) factory.plausibility.rule = PlausibilityRule::majority;
            const auto result =
                run_factory(seeds, ctx.taxonomy, FactoryBackends::from_bindings(ctx.bindings()), factory, ctx.prompts);
            write_corpus(result.corpus, synth_out, ctx.taxonomy);
            if (!rejects_out.empty()) {
                std::string lines;
                for (const auto& r : result.rejects) lines += reject_json(r) + "\n";
                write_text(rejects_out, lines);
            }
            const auto funnel = funnel_json(result.funnel) + "\n";
            if (funnel_out.empty()) {
                std::cerr << funnel;
            } else {
                write_text(funnel_out, funnel);
            }
            return result.complete ? 0 : 3;
        }

        if (*stats) {
            const auto corpus = read_corpus(stats_corpus, ctx.taxonomy);
            const auto s = compute_stats(corpus, token_mode_from_string(token_mode), &ctx.taxonomy);
            if (stats_as_json) {
                std::cout << stats_json(s) << "\n";
            } else {
                std::cout << render_stats_table(stats_name.empty() ? ctx.taxonomy.profile : stats_name, s);
            }
            return 0;
        }

        if (*severity) {
            auto corpus = read_corpus(sev_corpus, ctx.taxonomy);
            auto judger = ctx.bindings().for_role(RoleTag::judger);
            for (auto& d : corpus) d.severity = judge_severity(d, *judger);
            if (!sev_out.empty()) write_corpus(corpus, sev_out, ctx.taxonomy);
            const auto hist = relief_histogram(corpus);
            nlohmann::ordered_json j;
            for (const auto& [relief, count] : hist) j["histogram"][std::to_string(relief)] = count;
            j["relieved_by_2_or_more"] = fraction_relieved(hist, 2);
            j["n"] = corpus.size();
            std::cout << j.dump(2) << "\n";
            return 0;
        }

        if (*extract) {
            const auto corpus = read_corpus(ext_corpus, ctx.taxonomy);
            std::string lines;
            for (const auto& inst : extract_instances(corpus)) lines += instance_json(inst) + "\n";
            write_text(ext_out, lines);
            return 0;
        }

        if (*split_cmd) {
            const auto corpus = read_corpus(split_corpus, ctx.taxonomy);
            const auto a = split(corpus, split_seed, split_mode_from_string(split_mode));
            write_text(split_out, split_json(a) + "\n");
            return 0;
        }

        if (*eval) {
            eval_cfg.metrics.token_mode = token_mode_from_string(eval_token_mode);
            eval_cfg.oracle_profile = !no_oracle;
            eval_cfg.ablation = parse_ablation(eval_ablate);
            std::vector<MetricReport> rows;
            std::vector<Prediction> all_predictions;
            if (!rescore.empty()) {
                rows.push_back(score_predictions(read_predictions(rescore), !eval_cfg.ablation.count(Agent::planner),
                                                 eval_cfg.metrics, ablation_label(eval_cfg.ablation)));
            } else {
                if (eval_corpus.empty()) throw Error(ErrorCode::InvalidArgument, "eval needs a corpus or --rescore");
                if (matrix && !predictions_out.empty())
                    throw Error(ErrorCode::InvalidArgument, "--predictions saves a single row; drop --matrix or use --ablate");
                const auto corpus = read_corpus(eval_corpus, ctx.taxonomy);
                const auto instances =
                    eval_split.empty()
                        ? extract_instances(corpus)
                        : select_instances(corpus, split_from_json(read_file(eval_split)), split_name_from_string(eval_which));
                Engine engine(ctx.taxonomy, ctx.bindings(), ctx.settings.engine, ctx.prompts);
                std::vector<EvalResult> results;
                if (matrix) {
                    results = ablation_matrix(engine, instances, eval_cfg);
                } else {
                    results.push_back(evaluate(engine, instances, eval_cfg));
                }
                for (auto& r : results) {
                    rows.push_back(r.report);
                    all_predictions.insert(all_predictions.end(), r.predictions.begin(), r.predictions.end());
                }
                if (!predictions_out.empty()) write_predictions(all_predictions, predictions_out);
            }
            std::cout << render_metric_table(rows);
            if (!eval_out.empty()) write_text(eval_out, metric_reports_json(rows) + "\n");
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "esckit: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "esckit: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
