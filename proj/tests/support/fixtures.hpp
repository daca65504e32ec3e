#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "esckit/backend.hpp"
#include "esckit/corpus.hpp"
#include "esckit/taxonomy.hpp"

namespace fixtures {

using namespace esckit;

const LabelSet& cpsdd();
const LabelSet& esconv();

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// First label of every list.
Situation simple_situation(const LabelSet& taxonomy);

/// Greeting, then per step a user turn and a tagged system turn. Texts are
/// "<id> user <k>" / "<id> system <k>".
Dialogue make_dialogue(const std::string& id, const LabelSet& taxonomy, const std::vector<std::string>& path,
                       const Situation& situation, DialogueSource source = DialogueSource::seed);

/// Random valid dialogue; `expected_tokens` receives the token count of each
/// utterance under mixed tokenization, known by construction.
Dialogue random_dialogue(std::mt19937_64& rng, const std::string& id, const LabelSet& taxonomy,
                         std::size_t min_steps, std::size_t max_steps,
                         std::vector<std::size_t>* expected_tokens = nullptr);

/// One seed per group (first `n` groups, wrapping), varied situations.
std::vector<Dialogue> seed_corpus(const LabelSet& taxonomy, std::size_t n);

/// Scripted rule firing `fn` on every request of `role`.
ScriptRule responder(std::optional<RoleTag> role, std::function<std::optional<std::string>(const ChatRequest&)> fn);

/// Text of the whole request (all messages joined), for substring checks.
std::string request_text(const ChatRequest& request);

/// Parses the integer after "sit-" in a request id.
std::size_t situation_index(const std::string& request_id);

/// Path-guided transcript in the generator's output format.
std::string transcript_for(const std::vector<std::string>& path, const LabelSet& taxonomy, const std::string& tag,
                           const std::string& suffix = {});

// --- Scripted dataset factory used by the funnel tests. -------------------------------------

/// Per-situation script outcome; defined on the situation index only.
enum class FactoryCase {
    implausible,
    bad_path,
    malformed,
    accept_first,
    accept_short,  // accepted at first review but only 9 utterances
    refine_then_accept,
    exhausted,
    low_score,
    unparseable_score,
};

FactoryCase factory_case(std::size_t index);
std::vector<std::string> factory_path(std::size_t index, const LabelSet& taxonomy);

struct ScriptedFactory {
    BackendPtr generator;
    BackendPtr modifier;
    BackendPtr reviewer;
    std::vector<BackendPtr> judges;
};

ScriptedFactory scripted_factory(const LabelSet& taxonomy);

}  // namespace fixtures
