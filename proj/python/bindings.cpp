// Python bindings. Structured results cross the boundary as JSON text and
// are decoded by the esckit package.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "esckit/backend.hpp"
#include "esckit/corpus.hpp"
#include "esckit/engine.hpp"
#include "esckit/error.hpp"
#include "esckit/evalharness.hpp"
#include "esckit/metrics.hpp"
#include "esckit/service.hpp"
#include "esckit/synthesis.hpp"
#include "esckit/taxonomy.hpp"

namespace py = pybind11;
using namespace esckit;
using ojson = nlohmann::ordered_json;

namespace {

std::string situation_json(const Situation& s) {
    return ojson{{"group", s.group_id}, {"problems", s.problem_ids}, {"causes", s.cause_ids}, {"focuses", s.focus_ids}}
        .dump();
}

std::vector<TokenSeq> tokenize_all(const std::vector<std::string>& texts, TokenMode mode) {
    std::vector<TokenSeq> out;
    for (const auto& t : texts) out.push_back(tokenize(t, mode));
    return out;
}

// A live session over scripted backends: one fixed reply per role.
class ScriptedSession {
public:
    ScriptedSession(const std::string& profile, const std::map<std::string, std::string>& replies,
                    const std::vector<std::string>& ablation)
        : taxonomy_(resolve_taxonomy(profile)) {
        std::vector<ScriptRule> rules;
        for (const auto& [role_name, reply] : replies) {
            auto role = role_from_string(role_name);
            if (!role) throw Error(ErrorCode::BadConfig, "unknown role " + role_name);
            ScriptRule r;
            r.role = role;
            r.reply = reply;
            r.repeat = true;
            rules.push_back(std::move(r));
        }
        backend_ = scripted_backend(std::move(rules), "scripted");
        engine_ = std::make_unique<Engine>(taxonomy_, uniform_bindings(backend_));
        state_ = new_session("py", taxonomy_, parse_ablation(ablation));
    }

    std::string step(const std::string& text) {
        const auto result = engine_->step(state_, text);
        MessageEnvelope env{result.reply.text, result.reply.strategy_id, result.debug, state_.turn_index};
        return envelope_json(env, taxonomy_);
    }

    std::vector<std::pair<std::string, std::string>> transcript() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& u : state_.transcript) out.emplace_back(std::string(to_string(u.speaker)), u.text);
        return out;
    }

    std::vector<std::string> calls() const {
        std::vector<std::string> out;
        for (const auto& s : backend_->transcript()) out.emplace_back(to_string(s.request.role));
        return out;
    }

private:
    LabelSet taxonomy_;
    std::shared_ptr<ScriptedBackend> backend_;
    std::unique_ptr<Engine> engine_;
    SessionState state_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "esckit core bindings";

    static py::exception<Error> py_error(m, "EsckitError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object exc = py::handle(py_error.ptr())(e.what());
            exc.attr("code") = std::string(to_string(e.code()));
            PyErr_SetObject(py_error.ptr(), exc.ptr());
        }
    });

    m.def("builtin_profiles", &builtin_profiles);
    m.def("taxonomy_json", [](const std::string& spec) {
        return taxonomy_json(resolve_taxonomy(spec), builtin_profiles());
    });

    m.def("tokenize", [](const std::string& text, const std::string& mode) {
        return tokenize(text, token_mode_from_string(mode)).tokens;
    }, py::arg("text"), py::arg("mode") = "mixed");
    m.def("bleu", [](const std::string& cand, const std::string& ref, int n, bool smoothing, const std::string& mode) {
        const auto tm = token_mode_from_string(mode);
        return bleu_n(tokenize(cand, tm), tokenize(ref, tm), n, smoothing);
    }, py::arg("candidate"), py::arg("reference"), py::arg("n") = 4, py::arg("smoothing") = true,
       py::arg("mode") = "mixed");
    m.def("rouge_l", [](const std::string& cand, const std::string& ref, double beta, const std::string& mode) {
        const auto tm = token_mode_from_string(mode);
        return rouge_l(tokenize(cand, tm), tokenize(ref, tm), beta);
    }, py::arg("candidate"), py::arg("reference"), py::arg("beta") = 1.2, py::arg("mode") = "mixed");
    m.def("distinct", [](const std::vector<std::string>& responses, int n, bool pooled, const std::string& mode) {
        return distinct_n(tokenize_all(responses, token_mode_from_string(mode)), n,
                          pooled ? DistinctConvention::pooled : DistinctConvention::per_response_mean);
    }, py::arg("responses"), py::arg("n"), py::arg("pooled") = true, py::arg("mode") = "mixed");
    m.def("length_ratio", [](const std::vector<std::pair<std::string, std::string>>& pairs, const std::string& mode) {
        const auto tm = token_mode_from_string(mode);
        std::vector<std::pair<TokenSeq, TokenSeq>> tok;
        for (const auto& [c, r] : pairs) tok.emplace_back(tokenize(c, tm), tokenize(r, tm));
        return length_ratio(tok);
    }, py::arg("pairs"), py::arg("mode") = "mixed");
    m.def("score_corpus_json", [](const std::vector<std::pair<std::string, std::string>>& pairs,
                                  std::optional<std::vector<std::string>> predicted,
                                  std::optional<std::vector<std::string>> gold, const std::string& mode) {
        std::vector<ScoredPair> sp;
        for (const auto& [c, r] : pairs) sp.push_back({c, r});
        MetricConfig cfg;
        cfg.token_mode = token_mode_from_string(mode);
        const bool acc = predicted && gold;
        return metric_report_json(score_corpus(sp, cfg, acc ? &*predicted : nullptr, acc ? &*gold : nullptr));
    }, py::arg("pairs"), py::arg("predicted") = py::none(), py::arg("gold") = py::none(), py::arg("mode") = "mixed");

    m.def("read_corpus_jsonl", [](const std::string& path, const std::string& taxonomy) {
        std::vector<std::string> out;
        for (const auto& d : read_corpus(path, resolve_taxonomy(taxonomy))) out.push_back(dialogue_to_json(d));
        return out;
    }, py::arg("path"), py::arg("taxonomy") = "cpsdd");
    m.def("corpus_stats_json", [](const std::string& path, const std::string& taxonomy, const std::string& mode) {
        const auto tax = resolve_taxonomy(taxonomy);
        return stats_json(compute_stats(read_corpus(path, tax), token_mode_from_string(mode), &tax));
    }, py::arg("path"), py::arg("taxonomy") = "cpsdd", py::arg("mode") = "mixed");
    m.def("stats_table", [](const std::string& path, const std::string& taxonomy, const std::string& name,
                            const std::string& mode) {
        const auto tax = resolve_taxonomy(taxonomy);
        return render_stats_table(name, compute_stats(read_corpus(path, tax), token_mode_from_string(mode), &tax));
    }, py::arg("path"), py::arg("taxonomy") = "cpsdd", py::arg("name") = "corpus", py::arg("mode") = "mixed");
    m.def("extract_instances_jsonl", [](const std::string& path, const std::string& taxonomy) {
        std::vector<std::string> out;
        for (const auto& inst : extract_instances(read_corpus(path, resolve_taxonomy(taxonomy))))
            out.push_back(instance_json(inst));
        return out;
    }, py::arg("path"), py::arg("taxonomy") = "cpsdd");
    m.def("split_json", [](const std::string& path, std::uint64_t seed, const std::string& mode,
                           const std::string& taxonomy) {
        return split_json(split(read_corpus(path, resolve_taxonomy(taxonomy)), seed, split_mode_from_string(mode)));
    }, py::arg("path"), py::arg("seed") = 42, py::arg("mode") = "by_dialogue", py::arg("taxonomy") = "cpsdd");
    m.def("sample_situation_json", [](std::uint64_t seed, const std::string& taxonomy) {
        return situation_json(sample_situation(seed, resolve_taxonomy(taxonomy)));
    }, py::arg("seed"), py::arg("taxonomy") = "cpsdd");

    py::class_<ScriptedSession>(m, "ScriptedSession")
        .def(py::init<const std::string&, const std::map<std::string, std::string>&, const std::vector<std::string>&>(),
             py::arg("profile"), py::arg("replies"), py::arg("ablation") = std::vector<std::string>{})
        .def("step_json", &ScriptedSession::step)
        .def("transcript", &ScriptedSession::transcript)
        .def("calls", &ScriptedSession::calls);
}
