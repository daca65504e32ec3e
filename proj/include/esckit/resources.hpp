#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace esckit {

/// Files from prompts/ and config/ compiled into the library, keyed by their
/// repo-relative path (e.g. "prompts/planner.txt").
std::optional<std::string_view> embedded_resource(std::string_view name);
std::vector<std::string> embedded_resource_names();

}  // namespace esckit
