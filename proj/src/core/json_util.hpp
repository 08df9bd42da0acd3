#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "errors.hpp"

namespace clcae {

using Json = nlohmann::json;

// Throws ConfigError if `obj` holds a key outside `allowed`.
inline void reject_unknown_keys(const Json& obj, std::string_view section,
                                std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) {
    throw ConfigError(std::string(section) + ": expected a JSON object");
  }
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (auto a : allowed) known = known || (a == key);
    if (!known) throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_opt(const Json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace clcae
