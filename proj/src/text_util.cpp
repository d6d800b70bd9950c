#include "bisenet/text_util.hpp"

#include <array>
#include <charconv>
#include <cstdio>

#include "bisenet/errors.hpp"

namespace bisenet::text {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

namespace {
double parse_plain_double(const std::string& s) {
  double v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("not a number: '" + s + "'");
  }
  return v;
}
}  // namespace

double parse_double(const std::string& raw) {
  const std::string s = trim(raw);
  const auto slash = s.find('/');
  if (slash == std::string::npos) return parse_plain_double(s);
  const double num = parse_plain_double(trim(s.substr(0, slash)));
  const double den = parse_plain_double(trim(s.substr(slash + 1)));
  if (den == 0) throw ConfigError("division by zero in '" + s + "'");
  return num / den;
}

long long parse_int(const std::string& raw) {
  const std::string s = trim(raw);
  long long v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("not an integer: '" + s + "'");
  }
  return v;
}

bool parse_bool(const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "off" || s == "no") return false;
  throw ConfigError("not a boolean: '" + s + "'");
}

std::pair<int, int> parse_hw(const std::string& raw) {
  const std::string s = trim(raw);
  const auto x = s.find('x');
  if (x == std::string::npos) throw ConfigError("expected HxW, got '" + s + "'");
  const long long h = parse_int(s.substr(0, x));
  const long long w = parse_int(s.substr(x + 1));
  if (h < 1 || w < 1 || h > (1 << 20) || w > (1 << 20)) {
    throw ConfigError("invalid size '" + s + "'");
  }
  return {static_cast<int>(h), static_cast<int>(w)};
}

std::string format_double(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

std::string hex64(unsigned long long v) {
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", v);
  return std::string(buf.data(), 16);
}

}  // namespace bisenet::text
