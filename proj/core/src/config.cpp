#include "lmt/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "lmt/error.hpp"

namespace lmt {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(std::string v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return v.substr(1, v.size() - 2);
  return v;
}

// Strips a trailing comment that is not inside quotes.
std::string strip_comment(const std::string& line) {
  char quote = 0;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quote) {
      if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#' || c == ';') {
      return line.substr(0, i);
    }
  }
  return line;
}

}  // namespace

FlatConfig FlatConfig::parse(const std::string& text, const std::string& source) {
  FlatConfig cfg;
  cfg.source_ = source;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw FormatError(source, lineno, "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(source, lineno, "expected key = value");
    std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw FormatError(source, lineno, "empty key");
    if (!section.empty()) key = section + "." + key;
    cfg.values_[key] = unquote(trim(std::string_view(line).substr(eq + 1)));
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open config");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

std::optional<std::string> FlatConfig::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  used_.insert(key);
  return it->second;
}

std::string FlatConfig::get(const std::string& key, const std::string& fallback) const {
  return find(key).value_or(fallback);
}

namespace {

template <typename T>
T parse_integer(const std::string& source, const std::string& key, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw FormatError(source, 0, "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

}  // namespace

std::size_t FlatConfig::get_size(const std::string& key, std::size_t fallback) const {
  auto v = find(key);
  return v ? parse_integer<std::size_t>(source_, key, *v) : fallback;
}

std::uint64_t FlatConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto v = find(key);
  return v ? parse_integer<std::uint64_t>(source_, key, *v) : fallback;
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
  if (ec != std::errc() || ptr != v->data() + v->size())
    throw FormatError(source_, 0, "key '" + key + "': expected a number, got '" + *v + "'");
  return out;
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  std::string s = *v;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw FormatError(source_, 0, "key '" + key + "': expected a boolean, got '" + *v + "'");
}

std::vector<std::string> FlatConfig::unused() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

}  // namespace lmt
