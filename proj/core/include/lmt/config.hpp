#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lmt {

/// Flat "key = value" text. '#' and ';' start comments, "[section]" lines
/// prefix later keys with "section.". Later duplicates override earlier ones.
class FlatConfig {
 public:
  FlatConfig() = default;
  static FlatConfig parse(const std::string& text, const std::string& source = "<config>");
  static FlatConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get(const std::string& key, const std::string& fallback) const;
  std::optional<std::string> find(const std::string& key) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Keys never read through a getter.
  std::vector<std::string> unused() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string source_;
  mutable std::set<std::string> used_;
};

}  // namespace lmt
