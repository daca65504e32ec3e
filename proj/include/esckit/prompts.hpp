#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace esckit {

using PromptVars = std::map<std::string, std::string>;

/// Minimal mustache-style rendering:
///   {{name}}                 substitution
///   {{#name}}...{{/name}}    kept only when name is non-empty
///   {{^name}}...{{/name}}    kept only when name is empty
/// BadConfig for an unknown variable or an unbalanced section.
std::string render_template(std::string_view tmpl, const PromptVars& vars);

struct RenderedPrompt {
    std::string system;
    std::string user;
};

/// Named prompt templates. Each template has a "[system]" and a "[user]"
/// block. The builtin set is compiled from prompts/*.txt.
class PromptLibrary {
public:
    static const PromptLibrary& builtin();
    /// Starts from the builtin set and replaces any template found as
    /// <dir>/<name>.txt.
    static PromptLibrary with_overrides(const std::filesystem::path& dir);

    RenderedPrompt render(std::string_view name, const PromptVars& vars) const;
    bool has(std::string_view name) const;

private:
    std::map<std::string, std::string, std::less<>> templates_;
};

}  // namespace esckit
