#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace esckit {

enum class Section { groups, problems, causes, focuses, strategies };

std::string_view to_string(Section section);

struct LabelDef {
    std::string id;
    std::string name;
    std::string name_alt;  // second-language display name, may be empty
    std::string description;
    bool placeholder = false;

    bool operator==(const LabelDef&) const = default;
};

struct StrategyDef {
    std::string id;
    std::string name;
    std::string name_alt;
    std::string description;
    /// Prompt fragment telling the supporter how to realize the strategy.
    std::string guidance;
    bool placeholder = false;

    bool operator==(const StrategyDef&) const = default;
};

/// The label universe every other module resolves against. Immutable once
/// loaded, so a single instance may be shared across threads.
struct LabelSet {
    std::string profile;
    std::string language;
    std::string greeting;
    std::string default_strategy;
    std::vector<LabelDef> groups;
    std::vector<LabelDef> problems;
    std::vector<LabelDef> causes;
    std::vector<LabelDef> focuses;
    std::vector<StrategyDef> strategies;

    const std::vector<LabelDef>& labels(Section section) const;

    const LabelDef* find_label(Section section, std::string_view id) const;
    const StrategyDef* find_strategy(std::string_view id) const;
    bool contains(Section section, std::string_view id) const;

    bool operator==(const LabelSet&) const = default;
};

/// Parse and validate a taxonomy document (JSON). Throws Error with
/// ParseError(line), DuplicateId(id), EmptyList(section) or InvalidLabel.
LabelSet parse_taxonomy(std::string_view document);

/// Same as parse_taxonomy but reading from disk; MissingFile when absent.
LabelSet load_taxonomy(const std::filesystem::path& path);

/// One of the shipped profiles ("cpsdd", "esconv"), compiled into the
/// library from config/. BadConfig for unknown names.
LabelSet builtin_taxonomy(std::string_view profile);
std::vector<std::string> builtin_profiles();

/// `spec` is either a builtin profile name or a path to a document.
LabelSet resolve_taxonomy(const std::string& spec);

/// Case-insensitive, whitespace-normalized match on id, name or name_alt.
const StrategyDef* strategy_by_name(const LabelSet& set, std::string_view text);

/// Same rule as strategy_by_name, over one of the four label sections.
const LabelDef* label_by_name(const LabelSet& set, Section section, std::string_view text);

}  // namespace esckit
