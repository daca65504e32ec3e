#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Small string helpers shared across modules. All functions treat input as
// UTF-8 and only ever case-fold ASCII.
namespace esckit::text {

std::string_view trim(std::string_view s);
std::string trim_trailing(std::string_view s);
std::string to_lower_ascii(std::string_view s);

/// Trim, lowercase ASCII and collapse inner whitespace runs to one space.
std::string normalize_label(std::string_view s);

bool starts_with_icase(std::string_view s, std::string_view prefix);

std::vector<std::string> split_lines(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Decode one code point starting at `pos` and advance it. Malformed bytes
/// decode to U+FFFD and consume a single byte.
char32_t next_codepoint(std::string_view s, std::size_t& pos);
void append_utf8(std::string& out, char32_t cp);

bool is_cjk(char32_t cp);
bool is_space(char32_t cp);
bool is_ascii_punct(char32_t cp);

}  // namespace esckit::text
