#pragma once

#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "esckit/backend.hpp"
#include "esckit/corpus.hpp"
#include "esckit/prompts.hpp"
#include "esckit/taxonomy.hpp"

namespace esckit {

enum class Agent { profiler, summarizer, planner, supporter };

std::string_view to_string(Agent agent);

/// Agents switched off for a session. The supporter cannot be ablated.
using Ablation = std::set<Agent>;

/// Accepts "profiler", "summarizer", "planner" or the "w/o <agent>" spelling.
/// BadConfig(name) for anything else.
Ablation parse_ablation(const std::vector<std::string>& names);
std::vector<std::string> ablation_names(const Ablation& ablation);

/// Row label: "full", "w/o planner", "w/o planner&summarizer", "w/o all".
std::string ablation_label(const Ablation& ablation);

/// The eight rows in table order: full, three singles, three pairs, all.
const std::vector<Ablation>& table_ablations();

struct Profile {
    std::optional<std::string> group_id;
    std::vector<std::string> problem_ids;
    std::vector<std::string> cause_ids;
    std::vector<std::string> focus_ids;
    std::string notes;

    bool operator==(const Profile&) const = default;
};

struct Summary {
    std::string condensed_history;
    std::string emotion;
    std::string intent;
    std::string psychological_state;

    bool operator==(const Summary&) const = default;
};

/// Never fails: labels that do not resolve, or exceed three per list, are
/// appended to `notes`.
Profile parse_profile(std::string_view reply, const LabelSet& taxonomy);
Profile profile_from_situation(const Situation& situation);
std::string render_profile(const Profile& profile, const LabelSet& taxonomy);

/// Needs a non-empty "Summary:" field; the other three may be blank.
std::optional<Summary> parse_summary(std::string_view reply);
std::string render_summary(const Summary& summary);

/// Extracts a strategy from a planner reply ("Encouraging", "Strategy: Question.").
const StrategyDef* parse_strategy_reply(std::string_view reply, const LabelSet& taxonomy);

struct SessionState {
    std::string session_id;
    std::vector<Utterance> transcript;
    std::optional<Profile> profile;
    std::optional<Summary> summary;
    std::optional<std::string> last_strategy;
    Ablation ablation;
    /// User-turn count at which the profile was last computed.
    std::size_t profiled_at = 0;
    std::size_t fallback_count = 0;
    /// Number of completed steps.
    std::size_t turn_index = 0;

    std::size_t user_turns() const;
    bool operator==(const SessionState&) const = default;
};

/// Transcript holding only the taxonomy greeting.
SessionState new_session(std::string session_id, const LabelSet& taxonomy, Ablation ablation = {});

struct EngineConfig {
    /// The profiler runs on the first user turn and then every k user turns.
    std::size_t profiler_every = 3;
    /// Transcript turns shown to planner and supporter.
    std::size_t history_window = 10;
    int max_reasks = 1;
    /// Falls back to the taxonomy's default strategy when empty.
    std::string default_strategy;
};

struct StepDebug {
    std::optional<Profile> profile;
    std::optional<Summary> summary;
    std::optional<std::string> strategy;
    bool fallback_used = false;
    std::vector<Agent> agents_called;
};

struct StepResult {
    Utterance reply;
    StepDebug debug;
};

class Engine {
public:
    Engine(LabelSet taxonomy, BackendBindings bindings, EngineConfig config = {},
           PromptLibrary prompts = PromptLibrary::builtin());

    const LabelSet& taxonomy() const { return taxonomy_; }
    const EngineConfig& config() const { return config_; }
    const BackendBindings& bindings() const { return bindings_; }

    Profile run_profiler(const SessionState& state) const;
    Summary run_summarizer(const SessionState& state) const;
    /// Always returns a member of the strategy set; sets `fallback_used` when
    /// the reply could not be resolved after re-asks.
    std::string run_planner(const SessionState& state, bool& fallback_used) const;
    Utterance run_supporter(const SessionState& state, const std::optional<std::string>& strategy) const;

    /// Runs the enabled agents for a transcript that ends with a user turn
    /// and appends the reply. With `oracle` set, the profile is taken from
    /// that situation instead of calling the profiler. On any agent failure
    /// the state is left untouched and UpstreamBackendError is thrown.
    StepResult respond(SessionState& state, const Situation* oracle = nullptr) const;

    /// Appends the user turn (merged into a pending user turn left by an
    /// earlier failure) then calls respond. EmptyMessage for blank text.
    /// On failure the user turn is kept and no system turn is added.
    StepResult step(SessionState& state, std::string_view user_text) const;

private:
    std::string request_id(const SessionState& state, Agent agent) const;
    std::string history(const SessionState& state) const;

    LabelSet taxonomy_;
    BackendBindings bindings_;
    EngineConfig config_;
    PromptLibrary prompts_;
    std::string default_strategy_;
};

std::string profile_json(const Profile& profile);
std::string summary_json(const Summary& summary);

}  // namespace esckit
