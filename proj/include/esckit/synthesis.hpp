#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "esckit/backend.hpp"
#include "esckit/corpus.hpp"
#include "esckit/prompts.hpp"
#include "esckit/taxonomy.hpp"

namespace esckit {

// --- Situation sampling -----------------------------------------------------------

/// Derives the per-item seed from the run seed, so item i is reproducible on
/// its own (needed for resumable runs).
std::uint64_t situation_seed(std::uint64_t run_seed, std::uint64_t index);

/// Group uniform over groups; for problems/causes/focuses a count uniform
/// over {1, 2, 3} (capped by list size), then that many distinct labels
/// uniformly without replacement. Ids are listed in taxonomy order.
Situation sample_situation(std::mt19937_64& rng, const LabelSet& taxonomy);
Situation sample_situation(std::uint64_t seed, const LabelSet& taxonomy);

/// Fixture helper standing in for the expert seeding step: per group, up to
/// `per_group` situations from the pool, preferring ones that add unseen
/// problems/causes/focuses. Returns pool indices in selection order.
std::vector<std::size_t> select_seeding_situations(const std::vector<Situation>& pool, const LabelSet& taxonomy,
                                                   std::size_t per_group = 20);

// --- Plausibility -----------------------------------------------------------------

struct PlausibilityVerdict {
    std::string judge_name;
    bool plausible = false;
    std::string rationale;

    bool operator==(const PlausibilityVerdict&) const = default;
};

enum class PlausibilityRule { unanimous, majority };

struct PlausibilityOptions {
    PlausibilityRule rule = PlausibilityRule::unanimous;
    int max_reasks = 1;
};

/// Parses "yes|no" on the first line plus an optional "Rationale:" line.
std::optional<PlausibilityVerdict> parse_verdict(std::string_view reply);

/// Asks every judge. An unparseable reply (after re-asks) counts as a
/// rejecting verdict whose rationale records the raw reply.
std::vector<PlausibilityVerdict> judge_situation(const Situation& situation, const std::vector<BackendPtr>& judges,
                                                 const LabelSet& taxonomy, const PlausibilityOptions& options,
                                                 const std::string& request_prefix,
                                                 const PromptLibrary& prompts = PromptLibrary::builtin());

bool verdicts_accept(const std::vector<PlausibilityVerdict>& verdicts, PlausibilityRule rule);

struct JudgedSituation {
    std::size_t index = 0;
    Situation situation;
    std::vector<PlausibilityVerdict> verdicts;
};

struct PlausibilityResult {
    std::vector<JudgedSituation> kept;
    std::vector<JudgedSituation> rejected;
};

/// InvalidArgument when `judges` is empty.
PlausibilityResult filter_plausible(const std::vector<Situation>& situations, const std::vector<BackendPtr>& judges,
                                    const LabelSet& taxonomy, const PlausibilityOptions& options = {},
                                    const PromptLibrary& prompts = PromptLibrary::builtin());

// --- Demonstration retrieval ----------------------------------------------------------

/// |problems ∩| + |causes ∩| + |focuses ∩|.
int situation_overlap(const Situation& a, const Situation& b);

/// Same-group seeds ranked by overlap (desc) then id (asc); when no seed
/// shares the group, the best overall overlap with the same tie-break.
/// EmptySeedCorpus on an empty corpus.
const Dialogue& retrieve_demonstration(const Situation& situation, const std::vector<Dialogue>& seeds);

// --- Path generation --------------------------------------------------------------------

struct PathOptions {
    std::size_t min_steps = 4;
    std::size_t max_steps = 12;
    int max_reasks = 2;
};

/// Splits a reply into strategy mentions and resolves each one. Sets
/// `unresolved` to the first name that does not resolve.
std::optional<DialoguePath> parse_path(std::string_view reply, const LabelSet& taxonomy, std::string& unresolved);

/// UnresolvableStrategy(raw) or PathLengthOutOfBounds after re-asks.
DialoguePath generate_path(const Situation& situation, Backend& backend, const LabelSet& taxonomy,
                           const PathOptions& options = {}, const std::string& request_id = "path",
                           const PromptLibrary& prompts = PromptLibrary::builtin());

// --- CoT prompt ----------------------------------------------------------------------------

struct CotPrompt {
    std::string situation;
    std::string demonstration;
    std::string path;
    std::string instructions;
    /// System prompt sent alongside the rendered body.
    std::string system;

    /// The four sections in fixed order.
    std::string render() const;
};

/// Transcript lines: "System: <greeting>", "System [<strategy name>]: <text>",
/// "User: <text>". Newlines inside a text are flattened to spaces.
std::string render_transcript(const std::vector<Utterance>& utterances, const LabelSet& taxonomy);

/// Inverse of render_transcript. Accepts English or Chinese speaker prefixes,
/// ':' or '：', ignores lines before the first speaker line and appends
/// unprefixed lines to the previous turn. MalformedTranscript on unknown
/// strategy labels, consecutive same-speaker turns, or a first turn that is
/// not the system.
std::vector<Utterance> parse_transcript(std::string_view text, const LabelSet& taxonomy);

CotPrompt build_cot_prompt(const Situation& situation, const Dialogue& demonstration, const DialoguePath& path,
                           const LabelSet& taxonomy, const PromptLibrary& prompts = PromptLibrary::builtin());

// --- Generate / modify / review -------------------------------------------------------------

/// MalformedTranscript or PathMismatch(expected, got).
Dialogue generate_dialogue(const CotPrompt& prompt, Backend& backend, const LabelSet& taxonomy,
                           const Situation& situation, const DialoguePath& path, const std::string& dialogue_id,
                           const std::string& request_id = "generate");

/// Text may change, structure may not: same turn count, speakers and
/// strategy tags, else MalformedTranscript("structure changed").
Dialogue modify_dialogue(const Dialogue& draft, Backend& backend, const LabelSet& taxonomy,
                         const std::string& feedback = {}, const std::string& request_id = "modify",
                         const PromptLibrary& prompts = PromptLibrary::builtin());

/// "Score: 8\nFeedback: ...". Score must be an integer in 1..10.
std::optional<ReviewRound> parse_review(std::string_view reply);

struct ReviewOptions {
    int max_rounds = 3;
    int max_reasks = 2;
    int accept_at = 9;   // score >= accept_at: accepted
    int discard_at = 6;  // score <= discard_at: discarded
};

struct ReviewResult {
    Dialogue dialogue;
    ReviewRecord record;
    int modifier_calls = 0;
};

/// Score >= 9 accepts, 7..8 sends the feedback to the modifier and re-scores,
/// <= 6 discards; still in 7..8 after max_rounds is `exhausted`. An
/// unparseable score or a modifier failure discards with a reason. The
/// returned dialogue carries the record in `review`.
ReviewResult review_loop(const Dialogue& dialogue, Backend& reviewer, Backend& modifier, const LabelSet& taxonomy,
                         const ReviewOptions& options = {}, const std::string& request_prefix = "review",
                         const PromptLibrary& prompts = PromptLibrary::builtin());

// --- Factory ------------------------------------------------------------------------------------

enum class FactoryStage { plausibility, path, demonstration, generation, modification, review, length };

std::string_view to_string(FactoryStage stage);

struct RejectRecord {
    std::string situation_id;
    FactoryStage stage = FactoryStage::plausibility;
    std::string reason;
    /// Transport-level failures are retried when a run resumes.
    bool retryable = false;

    bool operator==(const RejectRecord&) const = default;
};

struct FunnelReport {
    std::size_t sampled = 0;
    std::size_t plausible = 0;
    std::size_t path_generated = 0;
    std::size_t demonstrated = 0;
    std::size_t generated = 0;
    std::size_t modified = 0;
    std::size_t accepted = 0;
    std::size_t length_ok = 0;
    std::size_t seeds = 0;
    std::size_t corpus_size = 0;
    std::map<std::string, std::size_t> rejected_by_stage;
    std::size_t accepted_first_round = 0;
    std::size_t accepted_after_refinement = 0;
    std::size_t review_discarded = 0;
    std::size_t review_exhausted = 0;
    std::size_t resumed_items = 0;

    bool operator==(const FunnelReport&) const = default;
};

std::string funnel_json(const FunnelReport& report);
std::string reject_json(const RejectRecord& reject);

struct FactoryBackends {
    BackendPtr generator;
    BackendPtr modifier;
    BackendPtr reviewer;
    std::vector<BackendPtr> judges;

    static FactoryBackends from_bindings(const BackendBindings& bindings);
};

struct FactoryConfig {
    std::size_t n_situations = 200;
    std::uint64_t seed = 42;
    std::size_t workers = 1;
    PlausibilityOptions plausibility;
    PathOptions path;
    ReviewOptions review;
    std::size_t min_utterances = kMinAcceptedUtterances;
    /// Append-only record of finished items; empty disables checkpointing.
    std::filesystem::path checkpoint;
    /// Stop after this many newly processed items (crash simulation).
    std::optional<std::size_t> stop_after;
};

struct FactoryResult {
    std::vector<Dialogue> corpus;
    FunnelReport funnel;
    std::vector<RejectRecord> rejects;
    bool complete = true;
};

/// Runs sample -> plausibility -> path -> demonstration -> CoT prompt ->
/// generate -> modify -> review -> length filter for every situation and
/// merges the survivors after the seeds. Per-item failures land in
/// `rejects`; they never abort the batch. Re-running with the same
/// checkpoint skips finished items and yields the same corpus.
FactoryResult run_factory(const std::vector<Dialogue>& seeds, const LabelSet& taxonomy,
                          const FactoryBackends& backends, const FactoryConfig& config,
                          const PromptLibrary& prompts = PromptLibrary::builtin());

std::string situation_id(std::size_t index);

}  // namespace esckit
