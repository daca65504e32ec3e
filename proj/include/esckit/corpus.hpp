#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "esckit/backend.hpp"
#include "esckit/metrics.hpp"
#include "esckit/taxonomy.hpp"

namespace esckit {

enum class Speaker { system, user };

std::string_view to_string(Speaker speaker);

struct Utterance {
    Speaker speaker = Speaker::system;
    std::string text;
    /// Present only on strategy-annotated system turns.
    std::optional<std::string> strategy_id;

    bool operator==(const Utterance&) const = default;
};

struct Situation {
    std::string group_id;
    std::vector<std::string> problem_ids;
    std::vector<std::string> cause_ids;
    std::vector<std::string> focus_ids;

    bool operator==(const Situation&) const = default;
};

/// InvariantViolation unless every list holds 1..3 distinct ids that
/// resolve in `taxonomy`.
void validate_situation(const Situation& situation, const LabelSet& taxonomy, std::string_view owner = {});

/// Human-readable one-block rendering used inside prompts.
std::string render_situation(const Situation& situation, const LabelSet& taxonomy);

struct DialoguePath {
    std::vector<std::string> steps;

    bool operator==(const DialoguePath&) const = default;
};

enum class ReviewOutcome { accepted, discarded, exhausted };

std::string_view to_string(ReviewOutcome outcome);

struct ReviewRound {
    int score = 0;
    std::string feedback;

    bool operator==(const ReviewRound&) const = default;
};

struct ReviewRecord {
    std::vector<ReviewRound> rounds;
    ReviewOutcome final = ReviewOutcome::discarded;
    /// Why a dialogue was discarded without a score (unparseable reply,
    /// modifier failure). Empty otherwise.
    std::string reason;

    bool operator==(const ReviewRecord&) const = default;
};

/// Five-level ordinal scale; relief = before - after.
enum class SeverityLevel : int { recovered = 0, minimal = 1, mild = 2, moderate = 3, severe = 4 };

std::string_view to_string(SeverityLevel level);
std::optional<SeverityLevel> severity_from_string(std::string_view name);

struct SeverityPair {
    SeverityLevel before = SeverityLevel::severe;
    SeverityLevel after = SeverityLevel::severe;

    int relief() const { return static_cast<int>(before) - static_cast<int>(after); }
    bool operator==(const SeverityPair&) const = default;
};

enum class DialogueSource { seed, generated };

std::string_view to_string(DialogueSource source);

struct Dialogue {
    std::string id;
    Situation situation;
    DialoguePath path;
    std::vector<Utterance> utterances;
    DialogueSource source = DialogueSource::seed;
    std::optional<ReviewRecord> review;
    std::optional<SeverityPair> severity;

    std::size_t count(Speaker speaker) const;
    bool operator==(const Dialogue&) const = default;
};

inline constexpr std::size_t kMinAcceptedUtterances = 10;

/// Checks every dialogue invariant: greeting first, strict alternation,
/// non-empty text, strategy tags only on system turns and resolvable, the
/// post-greeting strategy sequence equal to the path, situation bounds, and
/// >= 10 utterances for accepted generated dialogues. Throws
/// InvariantViolation with detail "<dialogue id>: <rule>".
void validate_dialogue(const Dialogue& dialogue, const LabelSet& taxonomy);

/// Strategy ids carried by system turns after the greeting, in order.
std::vector<std::string> realized_path(const Dialogue& dialogue);

// --- Serialization: UTF-8, one JSON record per line. -----------------------

std::string dialogue_to_json(const Dialogue& dialogue);
/// SchemaError(field) on structural problems; no invariant checks.
Dialogue dialogue_from_json(std::string_view line);

/// Validates every record (InvariantViolation) and reports SchemaError with
/// the 1-based line number. Blank lines are skipped.
std::vector<Dialogue> read_corpus(const std::filesystem::path& path, const LabelSet& taxonomy);
std::vector<Dialogue> parse_corpus(std::string_view contents, const LabelSet& taxonomy);
/// Validates before writing anything.
void write_corpus(const std::vector<Dialogue>& dialogues, const std::filesystem::path& path, const LabelSet& taxonomy);
std::string serialize_corpus(const std::vector<Dialogue>& dialogues, const LabelSet& taxonomy);

// --- Statistics ---------------------------------------------------------------

/// Exact rational; rounded only when displayed.
struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 1;

    double value() const { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }
    bool operator==(const Ratio&) const = default;
};

struct SideCounts {
    std::uint64_t total = 0;
    std::uint64_t system = 0;
    std::uint64_t user = 0;

    bool operator==(const SideCounts&) const = default;
};

struct CorpusStats {
    std::uint64_t n_dialogues = 0;
    SideCounts utterances;
    SideCounts tokens;
    Ratio avg_dialogue_len_total;
    Ratio avg_dialogue_len_system;
    Ratio avg_dialogue_len_user;
    Ratio avg_utterance_len_total;
    Ratio avg_utterance_len_system;
    Ratio avg_utterance_len_user;
    std::size_t n_strategies = 0;
    std::string language;
    TokenMode token_mode = TokenMode::mixed;

    bool operator==(const CorpusStats&) const = default;
};

/// EmptyCorpus for an empty input. The greeting counts as an utterance.
CorpusStats compute_stats(const std::vector<Dialogue>& dialogues, TokenMode mode, const LabelSet* taxonomy = nullptr);

/// "1.3K", "0.7M"; exact below 1000.
std::string humanize_count(std::uint64_t n);

/// One-row table with the columns Size | Utts. (System/User) |
/// #Dia.len (System/User) | #Utt.len (System/User) | St.s | Lan.
std::string render_stats_table(const std::string& name, const CorpusStats& stats);
std::string stats_json(const CorpusStats& stats);

// --- Severity -----------------------------------------------------------------

struct SeverityOptions {
    /// Extra attempts after an unparseable judger reply.
    int max_reasks = 2;
};

/// Judges severity from the first three user utterances (before) and the
/// final user utterance (after), one judger request each. Needs >= 4 user
/// turns (InsufficientTurns). UnparseableJudgment(raw) after re-asks.
SeverityPair judge_severity(const Dialogue& dialogue, Backend& judger, const SeverityOptions& options = {});

/// Finds a severity label in free text ("Severity: mild", "轻度").
std::optional<SeverityLevel> parse_severity(std::string_view reply);

/// Relief value -> count, only values that occur. MissingSeverity(id).
std::map<int, std::size_t> relief_histogram(const std::vector<Dialogue>& dialogues);

/// Fraction of dialogues whose relief is at least `levels`.
double fraction_relieved(const std::map<int, std::size_t>& histogram, int levels);

}  // namespace esckit
