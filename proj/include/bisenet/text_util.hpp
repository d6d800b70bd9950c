#pragma once

// Small parsing/formatting helpers shared by the config and manifest readers.

#include <string>
#include <string_view>
#include <vector>

namespace bisenet::text {

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

/// Accepts decimal and "a/b" fractions.
double parse_double(const std::string& s);
long long parse_int(const std::string& s);
bool parse_bool(const std::string& s);
/// "HxW" -> {H, W}
std::pair<int, int> parse_hw(const std::string& s);

/// Shortest representation that parses back to the same double.
std::string format_double(double v);
std::string hex64(unsigned long long v);

}  // namespace bisenet::text
