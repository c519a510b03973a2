#pragma once

// Synthetic fable datasets: every prompt fills a five-slot story scaffold,
// and the trained model writes the story.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fablelm/model.hpp"
#include "fablelm/tokenizer.hpp"

namespace fablelm {

struct SlotInventory {
  std::vector<std::string> characters;
  std::vector<std::string> settings;
  std::vector<std::string> challenges;
  std::vector<std::string> resolutions;
  std::vector<std::string> morals;

  /// Non-empty slots, non-empty unique entries.
  void validate() const;
  /// Product of the slot sizes. Throws InvalidArgument past 2^63.
  std::uint64_t combinations() const;

  /// {"characters": [...], "settings": [...], ...}
  static SlotInventory from_json(const std::string& text);
  static SlotInventory load(const std::filesystem::path& path);
};

/// One index per slot, in the order character, setting, challenge,
/// resolution, moral.
using Combo = std::array<std::size_t, 5>;

struct FableSlots {
  std::string character;
  std::string setting;
  std::string challenge;
  std::string resolution;
  std::string moral;

  friend bool operator==(const FableSlots&, const FableSlots&) = default;
};

FableSlots slots_for(const SlotInventory& inv, const Combo& combo);

/// count == combinations(): every combo in lexicographic order. Otherwise a
/// seeded sample of `count` distinct combos. Throws if count is larger.
std::vector<Combo> enumerate_combos(const SlotInventory& inv, std::uint64_t count,
                                    std::uint64_t seed);

std::string render_prompt(const FableSlots& slots);

struct FableGenParams {
  double temperature = 0.8;
  std::size_t top_k = 50;
  std::uint64_t base_seed = 0;
  std::size_t max_new = 256;
};

/// Seed for one record: base_seed + id, bumped by 2^32 per duplicate retry.
std::uint64_t record_seed(std::uint64_t base_seed, std::uint64_t id, std::size_t attempt);

/// Samples one story for a prompt with the given seed.
std::string generate_story(const Checkpoint& ckpt, const TokenizerModel& tok,
                           const std::string& prompt, const FableGenParams& params,
                           std::uint64_t seed);

struct FableRecord {
  std::uint64_t id = 0;
  FableSlots slots;
  std::string prompt;
  std::string text;
  double temperature = 0.0;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
  bool duplicate = false;  // still a duplicate after the last retry

  std::string to_json() const;  // one line, no newline
  static FableRecord from_json(const std::string& line);
};

struct FableGenOptions {
  bool resume = false;
  std::size_t max_attempts = 3;
  const std::atomic<bool>* cancel = nullptr;
  std::function<void(const FableRecord&)> on_record;
};

/// Writes records 0..n-1 as JSONL, flushing after each. Record i uses the
/// i-th combo of enumerate_combos(inv, n, base_seed). With `resume`, complete
/// records already in the file are kept and generation continues after the
/// last one. Returns the number of records in the file.
std::uint64_t generate_dataset(const Checkpoint& ckpt, const TokenizerModel& tok,
                               const SlotInventory& inv, std::uint64_t n,
                               const FableGenParams& params, const std::filesystem::path& out,
                               const FableGenOptions& options = {});

}  // namespace fablelm
