#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace affmtl {

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
// Whole-string parse; returns false on trailing garbage.
bool parse_double(std::string_view s, double& out);
bool parse_int(std::string_view s, long long& out);

std::vector<std::string> split(std::string_view s, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::string_view trim(std::string_view s);

std::string hex64(std::uint64_t v);

}  // namespace affmtl
