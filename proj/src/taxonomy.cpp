#include "esckit/taxonomy.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "esckit/error.hpp"
#include "esckit/resources.hpp"
#include "esckit/text.hpp"

namespace esckit {

using nlohmann::json;

std::string_view to_string(Section section) {
    switch (section) {
        case Section::groups: return "groups";
        case Section::problems: return "problems";
        case Section::causes: return "causes";
        case Section::focuses: return "focuses";
        case Section::strategies: return "strategies";
    }
    return "?";
}

const std::vector<LabelDef>& LabelSet::labels(Section section) const {
    switch (section) {
        case Section::groups: return groups;
        case Section::problems: return problems;
        case Section::causes: return causes;
        case Section::focuses: return focuses;
        case Section::strategies: break;
    }
    throw Error(ErrorCode::InvalidArgument, "strategies are not plain labels");
}

const LabelDef* LabelSet::find_label(Section section, std::string_view id) const {
    const auto& list = labels(section);
    auto it = std::find_if(list.begin(), list.end(), [&](const LabelDef& l) { return l.id == id; });
    return it == list.end() ? nullptr : &*it;
}

const StrategyDef* LabelSet::find_strategy(std::string_view id) const {
    auto it = std::find_if(strategies.begin(), strategies.end(),
                           [&](const StrategyDef& s) { return s.id == id; });
    return it == strategies.end() ? nullptr : &*it;
}

bool LabelSet::contains(Section section, std::string_view id) const {
    if (section == Section::strategies) return find_strategy(id) != nullptr;
    return find_label(section, id) != nullptr;
}

namespace {

long line_of_offset(std::string_view doc, std::size_t offset) {
    offset = std::min(offset, doc.size());
    return 1 + static_cast<long>(std::count(doc.begin(), doc.begin() + static_cast<long>(offset), '\n'));
}

bool valid_id(std::string_view id) {
    return !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
    });
}

std::string field_string(const json& entry, const char* key, const std::string& where, bool required) {
    auto it = entry.find(key);
    if (it == entry.end() || it->is_null()) {
        if (required) throw Error(ErrorCode::ParseError, where + "." + key + " missing");
        return {};
    }
    if (!it->is_string()) throw Error(ErrorCode::ParseError, where + "." + key + " must be a string");
    return it->get<std::string>();
}

template <typename Def>
void fill_common(Def& def, const json& entry, const std::string& where) {
    if (!entry.is_object()) throw Error(ErrorCode::ParseError, where + " must be an object");
    def.id = field_string(entry, "id", where, true);
    def.name = field_string(entry, "name", where, true);
    def.name_alt = field_string(entry, "name_alt", where, false);
    def.description = field_string(entry, "description", where, false);
    if (auto it = entry.find("placeholder"); it != entry.end()) {
        if (!it->is_boolean()) throw Error(ErrorCode::ParseError, where + ".placeholder must be a boolean");
        def.placeholder = it->get<bool>();
    }
    if (!valid_id(def.id)) throw Error(ErrorCode::InvalidLabel, where + ".id \"" + def.id + "\" must match [a-z0-9_]+");
    if (text::trim(def.name).empty()) throw Error(ErrorCode::InvalidLabel, where + ".name is empty");
}

const json& section_array(const json& root, Section section) {
    const std::string key(to_string(section));
    auto it = root.find(key);
    if (it == root.end() || (it->is_array() && it->empty())) throw Error(ErrorCode::EmptyList, key);
    if (!it->is_array()) throw Error(ErrorCode::ParseError, key + " must be an array");
    return *it;
}

template <typename Def>
void check_unique(const std::vector<Def>& defs) {
    std::unordered_set<std::string> seen;
    for (const auto& d : defs)
        if (!seen.insert(d.id).second) throw Error(ErrorCode::DuplicateId, d.id);
}

std::vector<LabelDef> parse_labels(const json& root, Section section) {
    std::vector<LabelDef> out;
    const auto& arr = section_array(root, section);
    for (std::size_t i = 0; i < arr.size(); ++i) {
        LabelDef def;
        fill_common(def, arr[i], std::string(to_string(section)) + "[" + std::to_string(i) + "]");
        out.push_back(std::move(def));
    }
    check_unique(out);
    return out;
}

std::vector<StrategyDef> parse_strategies(const json& root) {
    std::vector<StrategyDef> out;
    const auto& arr = section_array(root, Section::strategies);
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string where = "strategies[" + std::to_string(i) + "]";
        StrategyDef def;
        fill_common(def, arr[i], where);
        def.guidance = field_string(arr[i], "guidance", where, false);
        if (text::trim(def.guidance).empty()) throw Error(ErrorCode::InvalidLabel, where + ".guidance is empty");
        out.push_back(std::move(def));
    }
    check_unique(out);
    return out;
}

template <typename Def>
bool matches(const Def& def, const std::string& needle) {
    return needle == def.id || needle == text::normalize_label(def.name) ||
           (!def.name_alt.empty() && needle == text::normalize_label(def.name_alt));
}

}  // namespace

LabelSet parse_taxonomy(std::string_view document) {
    json root;
    try {
        root = json::parse(document.begin(), document.end());
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::ParseError, e.what(), line_of_offset(document, e.byte == 0 ? 0 : e.byte - 1));
    }
    if (!root.is_object()) throw Error(ErrorCode::ParseError, "document root must be an object", 1);

    LabelSet set;
    set.profile = field_string(root, "profile", "root", false);
    set.language = field_string(root, "language", "root", false);
    set.greeting = field_string(root, "greeting", "root", false);
    set.default_strategy = field_string(root, "default_strategy", "root", false);
    set.groups = parse_labels(root, Section::groups);
    set.problems = parse_labels(root, Section::problems);
    set.causes = parse_labels(root, Section::causes);
    set.focuses = parse_labels(root, Section::focuses);
    set.strategies = parse_strategies(root);

    if (set.default_strategy.empty()) {
        set.default_strategy = set.find_strategy("comforting") ? "comforting" : set.strategies.front().id;
    } else if (!set.find_strategy(set.default_strategy)) {
        throw Error(ErrorCode::InvalidLabel, "default_strategy \"" + set.default_strategy + "\" is not a strategy");
    }
    if (set.greeting.empty()) set.greeting = "Hello, how are you feeling today?";
    return set;
}

LabelSet load_taxonomy(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_taxonomy(buf.str());
}

LabelSet builtin_taxonomy(std::string_view profile) {
    auto doc = embedded_resource("config/" + std::string(profile) + ".json");
    if (!doc) throw Error(ErrorCode::BadConfig, "unknown taxonomy profile \"" + std::string(profile) + "\"");
    return parse_taxonomy(*doc);
}

std::vector<std::string> builtin_profiles() {
    std::vector<std::string> out;
    for (const auto& name : embedded_resource_names()) {
        if (name.rfind("config/", 0) == 0 && name.size() > 12 && name.ends_with(".json"))
            out.push_back(name.substr(7, name.size() - 12));
    }
    return out;
}

LabelSet resolve_taxonomy(const std::string& spec) {
    if (embedded_resource("config/" + spec + ".json")) return builtin_taxonomy(spec);
    return load_taxonomy(spec);
}

const StrategyDef* strategy_by_name(const LabelSet& set, std::string_view text) {
    const auto needle = text::normalize_label(text);
    if (needle.empty()) return nullptr;
    for (const auto& s : set.strategies)
        if (matches(s, needle)) return &s;
    return nullptr;
}

const LabelDef* label_by_name(const LabelSet& set, Section section, std::string_view text) {
    const auto needle = text::normalize_label(text);
    if (needle.empty()) return nullptr;
    for (const auto& l : set.labels(section))
        if (matches(l, needle)) return &l;
    return nullptr;
}

}  // namespace esckit
