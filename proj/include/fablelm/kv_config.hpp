#pragma once

// Flat key=value configuration files:
//
//   # comment
//   peak_lr = 3e-4
//   total_steps = 200
//
// Later assignments (including --set overrides) replace earlier ones.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "fablelm/error.hpp"

namespace fablelm {

class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(const std::string& text, const std::string& origin = "<string>");
  static KvConfig load(const std::filesystem::path& path);

  /// Applies a "key=value" override.
  void set_assignment(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;

  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;

  /// Throws InvalidArgument naming the first key not in `known`.
  void require_known(const std::set<std::string>& known) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical text form, keys sorted.
  std::string to_string() const;

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace fablelm
