#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "loco/error.hpp"

namespace loco {

using json = nlohmann::json;

namespace jsonu {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Rejects keys of `j` not in `known`, suggesting the closest known key.
inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) != known.end()) continue;
    std::string msg = where + ": unknown key '" + key + "'";
    std::size_t best = 3;
    std::string suggestion;
    for (const auto& k : known) {
      const std::size_t d = edit_distance(key, k);
      if (d < best) {
        best = d;
        suggestion = k;
      }
    }
    if (!suggestion.empty()) msg += " (did you mean '" + suggestion + "'?)";
    throw ConfigError(msg);
  }
}

template <typename V>
V get_or(const json& j, const char* key, V fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <typename V>
V require(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::array<std::size_t, 2> pair_of(const json& j, const std::string& where) {
  if (j.is_number_unsigned()) {
    const auto v = j.get<std::size_t>();
    return {v, v};
  }
  if (!j.is_array() || j.size() != 2) throw ConfigError(where + ": expected [h, w] or a single integer");
  return {j[0].get<std::size_t>(), j[1].get<std::size_t>()};
}

/// Parses text, converting parser errors into ConfigError with a line number.
inline json parse_with_lines(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    const std::size_t upto = std::min<std::size_t>(e.byte, text.size());
    for (std::size_t i = 0; i + 1 < upto; ++i)
      if (text[i] == '\n') ++line;
    throw ConfigError(source + ":" + std::to_string(line) + ": JSON parse error: " + e.what());
  }
}

}  // namespace jsonu
}  // namespace loco
