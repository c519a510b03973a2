#include "fablelm/utf8.hpp"

#include <algorithm>
#include <cstdint>

namespace fablelm::utf8 {
namespace {

void append_code_point(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Assumes valid input.
char32_t decode_at(std::string_view s, std::size_t pos, std::size_t len) {
  const auto b = [&](std::size_t i) { return static_cast<unsigned char>(s[pos + i]); };
  switch (len) {
    case 1: return b(0);
    case 2: return ((b(0) & 0x1F) << 6) | (b(1) & 0x3F);
    case 3: return ((b(0) & 0x0F) << 12) | ((b(1) & 0x3F) << 6) | (b(2) & 0x3F);
    default:
      return ((b(0) & 0x07) << 18) | ((b(1) & 0x3F) << 12) | ((b(2) & 0x3F) << 6) |
             (b(3) & 0x3F);
  }
}

char32_t lower_code_point(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;  // Latin-1: Â Î ...
  switch (cp) {
    case 0x0102: return 0x0103;  // Ă
    case 0x015E: return 0x015F;  // Ş
    case 0x0162: return 0x0163;  // Ţ
    case 0x0218: return 0x0219;  // Ș
    case 0x021A: return 0x021B;  // Ț
    default: return cp;
  }
}

}  // namespace

std::optional<std::size_t> find_invalid(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) {
      ++i;
      continue;
    }
    std::size_t len;
    char32_t min_cp;
    if ((c >> 5) == 0x6) {
      len = 2;
      min_cp = 0x80;
    } else if ((c >> 4) == 0xE) {
      len = 3;
      min_cp = 0x800;
    } else if ((c >> 3) == 0x1E) {
      len = 4;
      min_cp = 0x10000;
    } else {
      return i;
    }
    if (i + len > s.size()) return i;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return i;
    }
    const char32_t cp = decode_at(s, i, len);
    if (cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
    i += len;
  }
  return std::nullopt;
}

std::vector<std::string> split_chars(std::string_view s) {
  std::vector<std::string> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t len = sequence_length(static_cast<unsigned char>(s[i]));
    if (i + len > s.size()) len = s.size() - i;
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

std::size_t length(std::string_view s) {
  std::size_t n = 0;
  for (const char c : s) {
    if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::string to_lower(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t len = sequence_length(static_cast<unsigned char>(s[i]));
    if (i + len > s.size() || (len == 1 && static_cast<unsigned char>(s[i]) >= 0x80)) {
      // Not valid UTF-8 here; copy through untouched.
      len = std::min(len, s.size() - i);
      out.append(s.substr(i, len));
      i += len;
      continue;
    }
    const char32_t cp = decode_at(s, i, len);
    append_code_point(out, lower_code_point(cp));
    i += len;
  }
  return out;
}

}  // namespace fablelm::utf8
