#include "esckit/prompts.hpp"

#include <fstream>
#include <sstream>

#include "esckit/error.hpp"
#include "esckit/resources.hpp"
#include "esckit/text.hpp"

namespace esckit {

namespace {

// Renders tmpl[pos, end-of-section) and returns the position after the
// matching {{/section}} (or tmpl.size() at top level).
std::size_t render_range(std::string_view tmpl, std::size_t pos, const PromptVars& vars, std::string* out,
                         std::string_view section) {
    while (pos < tmpl.size()) {
        const auto open = tmpl.find("{{", pos);
        if (open == std::string_view::npos) {
            if (out) out->append(tmpl.substr(pos));
            pos = tmpl.size();
            break;
        }
        if (out) out->append(tmpl.substr(pos, open - pos));
        const auto close = tmpl.find("}}", open + 2);
        if (close == std::string_view::npos) throw Error(ErrorCode::BadConfig, "unterminated {{ in prompt template");
        const auto tag = text::trim(tmpl.substr(open + 2, close - open - 2));
        pos = close + 2;
        if (tag.empty()) throw Error(ErrorCode::BadConfig, "empty tag in prompt template");

        const char kind = tag.front();
        if (kind == '/') {
            if (tag.substr(1) != section) throw Error(ErrorCode::BadConfig, "unbalanced section " + std::string(tag));
            return pos;
        }
        if (kind == '#' || kind == '^') {
            const std::string name(tag.substr(1));
            auto it = vars.find(name);
            if (it == vars.end()) throw Error(ErrorCode::BadConfig, "unknown prompt variable " + name);
            const bool keep = (kind == '#') == !it->second.empty();
            pos = render_range(tmpl, pos, vars, keep ? out : nullptr, name);
            continue;
        }
        auto it = vars.find(std::string(tag));
        if (it == vars.end()) throw Error(ErrorCode::BadConfig, "unknown prompt variable " + std::string(tag));
        if (out) out->append(it->second);
    }
    if (!section.empty()) throw Error(ErrorCode::BadConfig, "section " + std::string(section) + " is not closed");
    return pos;
}

std::string collapse_blank_runs(const std::string& s) {
    std::string out;
    int newlines = 0;
    for (char c : s) {
        if (c == '\n') {
            if (++newlines > 2) continue;
        } else {
            newlines = 0;
        }
        out.push_back(c);
    }
    return std::string(text::trim(out));
}

}  // namespace

std::string render_template(std::string_view tmpl, const PromptVars& vars) {
    std::string out;
    render_range(tmpl, 0, vars, &out, {});
    return out;
}

const PromptLibrary& PromptLibrary::builtin() {
    static const PromptLibrary lib = [] {
        PromptLibrary l;
        for (const auto& name : embedded_resource_names()) {
            if (name.rfind("prompts/", 0) != 0 || !name.ends_with(".txt")) continue;
            l.templates_[name.substr(8, name.size() - 12)] = std::string(*embedded_resource(name));
        }
        return l;
    }();
    return lib;
}

PromptLibrary PromptLibrary::with_overrides(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::MissingFile, dir.string());
    PromptLibrary lib = builtin();
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".txt") continue;
        std::ifstream in(entry.path(), std::ios::binary);
        std::ostringstream buf;
        buf << in.rdbuf();
        lib.templates_[entry.path().stem().string()] = buf.str();
    }
    return lib;
}

bool PromptLibrary::has(std::string_view name) const { return templates_.find(name) != templates_.end(); }

RenderedPrompt PromptLibrary::render(std::string_view name, const PromptVars& vars) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw Error(ErrorCode::BadConfig, "no prompt template named " + std::string(name));
    const std::string& tmpl = it->second;
    const auto sys = tmpl.find("[system]");
    const auto usr = tmpl.find("[user]");
    if (sys == std::string::npos || usr == std::string::npos || usr < sys)
        throw Error(ErrorCode::BadConfig, "prompt " + std::string(name) + " needs [system] then [user] blocks");
    RenderedPrompt out;
    out.system = collapse_blank_runs(render_template(std::string_view(tmpl).substr(sys + 8, usr - sys - 8), vars));
    out.user = collapse_blank_runs(render_template(std::string_view(tmpl).substr(usr + 6), vars));
    return out;
}

}  // namespace esckit
