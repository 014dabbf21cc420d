#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cfood/error.hpp"

// Offsets throughout the toolkit count Unicode code points, not bytes.
namespace cfood::detail {

inline bool is_continuation(unsigned char c) noexcept { return (c & 0xC0) == 0x80; }

/// Byte offset of every code point, plus a trailing entry equal to s.size().
inline std::vector<std::size_t> codepoint_offsets(std::string_view s) {
  std::vector<std::size_t> out;
  out.reserve(s.size() + 1);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!is_continuation(static_cast<unsigned char>(s[i]))) out.push_back(i);
  }
  out.push_back(s.size());
  return out;
}

inline std::size_t codepoint_length(std::string_view s) noexcept {
  std::size_t n = 0;
  for (unsigned char c : s) n += !is_continuation(c);
  return n;
}

/// Substring by half-open code-point range.
inline std::string utf8_slice(std::string_view s, std::size_t cp_begin, std::size_t cp_end) {
  const auto offs = codepoint_offsets(s);
  const std::size_t n = offs.size() - 1;
  if (cp_begin > cp_end || cp_end > n) {
    throw PreconditionError("code-point range [" + std::to_string(cp_begin) + ", " + std::to_string(cp_end) +
                            ") outside text of length " + std::to_string(n));
  }
  return std::string(s.substr(offs[cp_begin], offs[cp_end] - offs[cp_begin]));
}

/// Decodes to code points. Invalid sequences decode byte-wise as U+FFFD.
inline std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
      out.push_back(U'�');
      ++i;
      continue;
    }
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    bool ok = true;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if (!is_continuation(cc)) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (!ok) {
      out.push_back(U'�');
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

}  // namespace cfood::detail
