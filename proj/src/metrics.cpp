#include "esckit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "esckit/error.hpp"
#include "esckit/text.hpp"

namespace esckit {

std::string_view to_string(TokenMode mode) {
    switch (mode) {
        case TokenMode::char_cjk: return "char_cjk";
        case TokenMode::whitespace_latin: return "whitespace_latin";
        case TokenMode::mixed: return "mixed";
    }
    return "?";
}

TokenMode token_mode_from_string(std::string_view name) {
    if (name == "char_cjk") return TokenMode::char_cjk;
    if (name == "whitespace_latin") return TokenMode::whitespace_latin;
    if (name == "mixed") return TokenMode::mixed;
    throw Error(ErrorCode::BadConfig, "unknown token mode " + std::string(name));
}

std::string_view to_string(DistinctConvention convention) {
    return convention == DistinctConvention::pooled ? "pooled" : "per_response_mean";
}

TokenSeq tokenize(std::string_view input, TokenMode mode) {
    TokenSeq seq;
    seq.mode = mode;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) seq.tokens.push_back(std::move(word));
        word.clear();
    };
    std::size_t pos = 0;
    while (pos < input.size()) {
        const char32_t cp = text::next_codepoint(input, pos);
        if (text::is_space(cp)) {
            flush();
            continue;
        }
        std::string ch;
        if (mode == TokenMode::char_cjk) {
            text::append_utf8(ch, cp);
            seq.tokens.push_back(std::move(ch));
            continue;
        }
        if ((mode == TokenMode::mixed && text::is_cjk(cp)) || text::is_ascii_punct(cp)) {
            flush();
            text::append_utf8(ch, (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp);
            seq.tokens.push_back(std::move(ch));
            continue;
        }
        text::append_utf8(word, (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp);
    }
    flush();
    return seq;
}

namespace {

std::string ngram_key(const std::vector<std::string>& tokens, std::size_t start, int n) {
    std::string key;
    for (int i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += tokens[start + static_cast<std::size_t>(i)];
    }
    return key;
}

std::unordered_map<std::string, int> ngram_counts(const std::vector<std::string>& tokens, int n) {
    std::unordered_map<std::string, int> counts;
    if (tokens.size() < static_cast<std::size_t>(n)) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) ++counts[ngram_key(tokens, i, n)];
    return counts;
}

}  // namespace

std::vector<double> bleu_n(const TokenSeq& candidate, const TokenSeq& reference, int n_max, bool smoothing) {
    if (n_max < 1 || n_max > 4) throw Error(ErrorCode::InvalidArgument, "n_max must be in 1..4");
    std::vector<double> out(static_cast<std::size_t>(n_max), 0.0);
    if (candidate.empty()) return out;

    const double c = static_cast<double>(candidate.size());
    const double r = static_cast<double>(reference.size());
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;

    double log_sum = 0.0;
    bool zero = false;
    for (int n = 1; n <= n_max; ++n) {
        const auto cand = ngram_counts(candidate.tokens, n);
        const auto ref = ngram_counts(reference.tokens, n);
        long matched = 0;
        long total = 0;
        for (const auto& [gram, count] : cand) {
            total += count;
            if (auto it = ref.find(gram); it != ref.end()) matched += std::min(count, it->second);
        }
        double p;
        if (matched > 0) {
            p = static_cast<double>(matched) / static_cast<double>(total);
        } else if (n > 1 && smoothing) {
            p = 1.0 / static_cast<double>(total + 1);
        } else {
            p = 0.0;
        }
        if (p == 0.0) zero = true;
        if (!zero) log_sum += std::log(p);
        out[static_cast<std::size_t>(n - 1)] = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / n);
    }
    return out;
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, double beta) {
    const auto& a = candidate.tokens;
    const auto& b = reference.tokens;
    if (a.empty() || b.empty()) return 0.0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    const double lcs = static_cast<double>(prev[b.size()]);
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(a.size());
    const double r = lcs / static_cast<double>(b.size());
    const double b2 = beta * beta;
    return 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
}

double distinct_n(const std::vector<TokenSeq>& responses, int n, DistinctConvention convention) {
    if (n < 1 || n > 3) throw Error(ErrorCode::InvalidArgument, "distinct n must be in 1..3");
    if (convention == DistinctConvention::pooled) {
        std::unordered_set<std::string> unique;
        std::size_t total = 0;
        for (const auto& r : responses) {
            if (r.size() < static_cast<std::size_t>(n)) continue;
            for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= r.size(); ++i) {
                unique.insert(ngram_key(r.tokens, i, n));
                ++total;
            }
        }
        return total == 0 ? 0.0 : 100.0 * static_cast<double>(unique.size()) / static_cast<double>(total);
    }
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& r : responses) {
        if (r.size() < static_cast<std::size_t>(n)) continue;
        std::unordered_set<std::string> unique;
        const std::size_t total = r.size() - static_cast<std::size_t>(n) + 1;
        for (std::size_t i = 0; i < total; ++i) unique.insert(ngram_key(r.tokens, i, n));
        sum += static_cast<double>(unique.size()) / static_cast<double>(total);
        ++counted;
    }
    return counted == 0 ? 0.0 : 100.0 * sum / static_cast<double>(counted);
}

double length_ratio(const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs) {
    if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "length_ratio needs at least one pair");
    double sum = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        if (pairs[i].second.empty()) throw Error(ErrorCode::EmptyReference, std::to_string(i));
        sum += static_cast<double>(pairs[i].first.size()) / static_cast<double>(pairs[i].second.size());
    }
    return sum / static_cast<double>(pairs.size());
}

double strategy_accuracy(const std::vector<std::string>& predicted, const std::vector<std::string>& gold) {
    if (predicted.size() != gold.size())
        throw Error(ErrorCode::LengthMismatch,
                    std::to_string(predicted.size()) + " predictions vs " + std::to_string(gold.size()) + " gold labels");
    if (gold.empty()) throw Error(ErrorCode::EmptyInput, "no strategy labels");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) hits += predicted[i] == gold[i] ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(gold.size());
}

MetricReport score_corpus(const std::vector<ScoredPair>& pairs, const MetricConfig& config,
                          const std::vector<std::string>* predicted_strategies,
                          const std::vector<std::string>* gold_strategies) {
    if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "no scored pairs");
    MetricReport report;
    report.config = config;
    report.n_instances = pairs.size();

    std::vector<TokenSeq> candidates;
    std::vector<std::pair<TokenSeq, TokenSeq>> tokenized;
    candidates.reserve(pairs.size());
    tokenized.reserve(pairs.size());
    std::vector<double> bleu_sum(4, 0.0);
    double rouge_sum = 0.0;
    for (const auto& p : pairs) {
        auto cand = tokenize(p.candidate, config.token_mode);
        auto ref = tokenize(p.reference, config.token_mode);
        const auto b = bleu_n(cand, ref, 4, config.bleu_smoothing);
        for (std::size_t k = 0; k < 4; ++k) bleu_sum[k] += b[k];
        rouge_sum += rouge_l(cand, ref, config.rouge_beta);
        candidates.push_back(cand);
        tokenized.emplace_back(std::move(cand), std::move(ref));
    }
    const double n = static_cast<double>(pairs.size());
    for (int k = 1; k <= 4; ++k) report.bleu[k] = bleu_sum[static_cast<std::size_t>(k - 1)] / n;
    report.rouge_l = rouge_sum / n;
    for (int k = 1; k <= 3; ++k) {
        report.distinct_pooled[k] = distinct_n(candidates, k, DistinctConvention::pooled);
        report.distinct_per_response[k] = distinct_n(candidates, k, DistinctConvention::per_response_mean);
    }
    report.length_ratio = length_ratio(tokenized);
    if (predicted_strategies && gold_strategies)
        report.acc = strategy_accuracy(*predicted_strategies, *gold_strategies);
    return report;
}

namespace {

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

nlohmann::ordered_json report_to_json(const MetricReport& r) {
    nlohmann::ordered_json j;
    j["label"] = r.label;
    j["acc"] = r.acc ? nlohmann::ordered_json(*r.acc) : nlohmann::ordered_json(nullptr);
    for (const auto& [k, v] : r.bleu) j["bleu"][std::to_string(k)] = v;
    for (const auto& [k, v] : r.distinct_pooled) j["distinct"]["pooled"][std::to_string(k)] = v;
    for (const auto& [k, v] : r.distinct_per_response) j["distinct"]["per_response_mean"][std::to_string(k)] = v;
    j["rouge_l"] = r.rouge_l;
    j["length_ratio"] = r.length_ratio;
    j["n_instances"] = r.n_instances;
    j["n_failed"] = r.n_failed;
    j["config"] = {{"token_mode", to_string(r.config.token_mode)},
                   {"bleu", r.config.bleu_smoothing ? "sentence, single reference, add-one on zero higher orders"
                                                    : "sentence, single reference, unsmoothed"},
                   {"rouge_beta", r.config.rouge_beta},
                   {"distinct_display", to_string(r.config.distinct_display)}};
    return j;
}

}  // namespace

std::string render_metric_table(const std::vector<MetricReport>& rows) {
    const std::vector<std::string> header = {"Model", "ACC", "B-1", "B-2", "B-3", "B-4", "D-1", "D-2", "D-3", "R-L", "L-R"};
    std::vector<std::vector<std::string>> cells{header};
    for (const auto& r : rows) {
        const auto& distinct = r.config.distinct_display == DistinctConvention::pooled ? r.distinct_pooled
                                                                                        : r.distinct_per_response;
        std::vector<std::string> line{r.label.empty() ? "-" : r.label, r.acc ? fixed(*r.acc, 2) : "-"};
        for (int k = 1; k <= 4; ++k) line.push_back(r.bleu.count(k) ? fixed(r.bleu.at(k), 2) : "-");
        for (int k = 1; k <= 3; ++k) line.push_back(distinct.count(k) ? fixed(distinct.at(k), 2) : "-");
        line.push_back(fixed(r.rouge_l, 2));
        line.push_back(fixed(r.length_ratio, 2));
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells)
        for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t c = 0; c < cells[i].size(); ++c) {
            const auto& s = cells[i][c];
            if (c == 0) {
                out += s + std::string(width[c] - s.size(), ' ');
            } else {
                out += "  " + std::string(width[c] - s.size(), ' ') + s;
            }
        }
        out += '\n';
        if (i == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            out += std::string(total - 2, '-') + '\n';
        }
    }
    return out;
}

std::string metric_report_json(const MetricReport& report) { return report_to_json(report).dump(2); }

std::string metric_reports_json(const std::vector<MetricReport>& reports) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) arr.push_back(report_to_json(r));
    return arr.dump(2);
}

}  // namespace esckit
