#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "esckit/corpus.hpp"
#include "esckit/engine.hpp"
#include "esckit/metrics.hpp"

namespace esckit {

/// One prediction target: the system turn at `turn_index` given everything
/// before it except the greeting.
struct Instance {
    std::string dialogue_id;
    std::size_t turn_index = 0;
    std::vector<Utterance> history;
    std::string gold_strategy;
    std::string gold_response;
    Situation situation;

    /// "<dialogue_id>#<turn_index>"
    std::string id() const;
    bool operator==(const Instance&) const = default;
};

std::vector<Instance> extract_instances(const Dialogue& dialogue);
std::vector<Instance> extract_instances(const std::vector<Dialogue>& dialogues);

std::string instance_json(const Instance& instance);
Instance instance_from_json(std::string_view line);

enum class SplitName { train, dev, test };
enum class SplitMode { by_dialogue, by_instance };

std::string_view to_string(SplitName name);
std::string_view to_string(SplitMode mode);
SplitName split_name_from_string(std::string_view name);
SplitMode split_mode_from_string(std::string_view name);

struct SplitRatios {
    unsigned train = 8;
    unsigned dev = 1;
    unsigned test = 1;
};

struct SplitAssignment {
    SplitMode mode = SplitMode::by_dialogue;
    std::uint64_t seed = 0;
    SplitRatios ratios;
    /// Dialogue id (by_dialogue) or instance id (by_instance) -> split.
    std::map<std::string, SplitName> assignment;

    /// Ids of one split, sorted.
    std::vector<std::string> ids(SplitName name) const;
    std::size_t count(SplitName name) const;
};

/// Sorts the ids, shuffles them with the seed, gives dev and test
/// floor(n * ratio / total) items each and the remainder to train.
/// TooFewItems below 10 ids; DuplicateId on repeated ids.
SplitAssignment split_ids(std::vector<std::string> ids, std::uint64_t seed, SplitMode mode, SplitRatios ratios = {});

SplitAssignment split(const std::vector<Dialogue>& dialogues, std::uint64_t seed,
                      SplitMode mode = SplitMode::by_dialogue, SplitRatios ratios = {});

/// Instances that fall into `name` under the assignment.
std::vector<Instance> select_instances(const std::vector<Dialogue>& dialogues, const SplitAssignment& assignment,
                                       SplitName name);

std::string split_json(const SplitAssignment& assignment);
SplitAssignment split_from_json(std::string_view document);

struct Prediction {
    std::string instance_id;
    std::optional<std::string> strategy;
    std::string text;
    std::string gold_strategy;
    std::string gold_response;
    bool failed = false;
    std::string error;

    bool operator==(const Prediction&) const = default;
};

std::string prediction_json(const Prediction& prediction);
Prediction prediction_from_json(std::string_view line);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
void write_predictions(const std::vector<Prediction>& predictions, const std::filesystem::path& path);

struct EvalConfig {
    Ablation ablation;
    /// Use the annotated situation as the profile instead of calling the profiler.
    bool oracle_profile = true;
    double max_failure_rate = 0.05;
    std::size_t workers = 1;
    MetricConfig metrics;
    /// Row label; defaults to the ablation label.
    std::string label;
};

struct EvalResult {
    MetricReport report;
    std::vector<Prediction> predictions;
    Ablation ablation;
};

/// Rescores saved predictions. Failed ones are excluded and counted. ACC
/// only when `with_acc`.
MetricReport score_predictions(const std::vector<Prediction>& predictions, bool with_acc, const MetricConfig& config,
                               const std::string& label);

/// Runs the engine once per instance. EmptyInput for no instances;
/// FailureRateExceeded when failures exceed the configured bound.
EvalResult evaluate(const Engine& engine, const std::vector<Instance>& instances, const EvalConfig& config);

/// All eight ablation rows in table order.
std::vector<EvalResult> ablation_matrix(const Engine& engine, const std::vector<Instance>& instances,
                                        const EvalConfig& config);

}  // namespace esckit
