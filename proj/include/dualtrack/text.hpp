#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace dualtrack::text {

// Lower-cases and splits on anything that is not a letter, digit, apostrophe
// or underscore. Apostrophes are then dropped ("nate's" -> "nates").
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '_') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '\'') {
      continue;
    } else {
      flush();
    }
  }
  flush();
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

// "Mary Jane!" -> "mary_jane"; the ASP atom form of a typed name.
inline std::string canonical_name(std::string_view typed) {
  return join(tokenize(typed), "_");
}

// "mary_jane" -> "mary jane"; the surface form users type.
inline std::string surface_of(std::string_view canonical) {
  std::string s(canonical);
  for (auto& c : s)
    if (c == '_') c = ' ';
  return s;
}

inline std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace dualtrack::text
