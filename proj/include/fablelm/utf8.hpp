#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fablelm::utf8 {

/// Byte offset of the first invalid sequence, or nullopt if `s` is valid
/// UTF-8 (no overlongs, no surrogates, max U+10FFFF).
std::optional<std::size_t> find_invalid(std::string_view s);

inline bool is_valid(std::string_view s) { return !find_invalid(s).has_value(); }

/// Length of the sequence starting with lead byte `c` (1 for invalid leads).
inline std::size_t sequence_length(unsigned char c) {
  if (c < 0x80) return 1;
  if ((c >> 5) == 0x6) return 2;
  if ((c >> 4) == 0xE) return 3;
  if ((c >> 3) == 0x1E) return 4;
  return 1;
}

/// Splits valid UTF-8 into one string per code point.
std::vector<std::string> split_chars(std::string_view s);

/// Number of code points.
std::size_t length(std::string_view s);

/// Lowercases ASCII, Latin-1 capitals and the Romanian letters (ă â î ș ț,
/// including the cedilla forms ş ţ). Everything else passes through.
std::string to_lower(std::string_view s);

}  // namespace fablelm::utf8
