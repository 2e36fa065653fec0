#pragma once

#include <string>
#include <string_view>

namespace oet {

inline char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

inline std::string ascii_lower_copy(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = ascii_lower(c);
  return out;
}

// Case-insensitive substring (ASCII folding only); the success rule shared by
// the harness and the PAIR loop.
inline bool contains_ci(std::string_view haystack, std::string_view needle) {
  if (needle.empty()) return true;
  return ascii_lower_copy(haystack).find(ascii_lower_copy(needle)) != std::string::npos;
}

}  // namespace oet
