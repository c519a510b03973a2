#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace fablelm {

inline constexpr const char* kVersionString = "0.1.0";

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// "2026-01-31T12:00:00Z"
std::string iso8601_utc(std::chrono::system_clock::time_point t);

/// What a CLI run consumed and how it was configured, written next to its
/// outputs once the run finishes.
struct RunManifest {
  std::string subcommand;
  std::map<std::string, std::string> config;  // effective settings after overrides
  std::uint64_t seed = 0;
  std::string version = kVersionString;
  std::map<std::string, std::string> input_digests;  // path -> sha256
  std::string started;
  std::string finished;
  int exit_code = 0;

  void add_input(const std::filesystem::path& path);

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  /// Atomic: temp file then rename.
  void write(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

}  // namespace fablelm
