#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace esckit {

enum class TokenMode { char_cjk, whitespace_latin, mixed };

std::string_view to_string(TokenMode mode);
/// BadConfig on unknown names.
TokenMode token_mode_from_string(std::string_view name);

struct TokenSeq {
    std::vector<std::string> tokens;
    TokenMode mode = TokenMode::mixed;

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }
    bool operator==(const TokenSeq&) const = default;
};

/// char_cjk: every non-space character is a token.
/// whitespace_latin: lowercased; words split on whitespace, ASCII punctuation
/// becomes its own token.
/// mixed: CJK code points are single tokens, everything else as
/// whitespace_latin.
TokenSeq tokenize(std::string_view text, TokenMode mode);

enum class DistinctConvention { pooled, per_response_mean };

std::string_view to_string(DistinctConvention convention);

struct MetricConfig {
    TokenMode token_mode = TokenMode::mixed;
    /// Add-one smoothing for higher orders with zero clipped matches.
    bool bleu_smoothing = true;
    double rouge_beta = 1.2;
    /// Which Distinct convention the text table shows; both are always in
    /// the machine-readable record.
    DistinctConvention distinct_display = DistinctConvention::pooled;
};

/// Single-reference sentence BLEU for orders 1..n_max, as percentages.
/// Result index k-1 holds BLEU-k. Empty candidate scores 0 at every order.
std::vector<double> bleu_n(const TokenSeq& candidate, const TokenSeq& reference, int n_max, bool smoothing = true);

/// LCS-based F-measure ×100. Both empty is defined as 0.
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference, double beta = 1.2);

/// Unique n-gram ratio ×100. Responses shorter than n contribute no n-grams
/// and are skipped in the per-response mean. No n-grams anywhere gives 0.
double distinct_n(const std::vector<TokenSeq>& responses, int n, DistinctConvention convention);

/// Mean of |candidate| / |reference|. EmptyReference(index), EmptyInput.
double length_ratio(const std::vector<std::pair<TokenSeq, TokenSeq>>& pairs);

/// Exact-match percentage. EmptyInput, LengthMismatch.
double strategy_accuracy(const std::vector<std::string>& predicted, const std::vector<std::string>& gold);

struct MetricReport {
    std::string label;
    std::optional<double> acc;
    std::map<int, double> bleu;  // 1..4
    double rouge_l = 0.0;
    std::map<int, double> distinct_pooled;  // 1..3
    std::map<int, double> distinct_per_response;
    double length_ratio = 0.0;
    std::size_t n_instances = 0;
    std::size_t n_failed = 0;
    MetricConfig config;
};

struct ScoredPair {
    std::string candidate;
    std::string reference;
};

/// Corpus report: BLEU and ROUGE-L are means of sentence scores, Distinct
/// is computed over all candidates, L-R over all pairs. ACC is filled only
/// when both strategy lists are given.
MetricReport score_corpus(const std::vector<ScoredPair>& pairs, const MetricConfig& config,
                          const std::vector<std::string>* predicted_strategies = nullptr,
                          const std::vector<std::string>* gold_strategies = nullptr);

/// Aligned table in the column order ACC, B-1..4, D-1..3, R-L, L-R. A
/// missing ACC prints as "-".
std::string render_metric_table(const std::vector<MetricReport>& rows);

/// Machine-readable record (JSON text).
std::string metric_report_json(const MetricReport& report);
std::string metric_reports_json(const std::vector<MetricReport>& reports);

}  // namespace esckit
