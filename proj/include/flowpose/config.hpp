#pragma once

// Helpers for JSON configuration objects. Every config struct exposes a key
// table; parsing rejects keys outside it and --help prints it.

#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "flowpose/error.hpp"

namespace flowpose {

struct KeySpec {
  std::string key;
  std::string type;
  std::string help;
};

inline void check_keys(const nlohmann::json& j, std::span<const KeySpec> keys, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::Config, where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const auto& k : keys) known = known || k.key == it.key();
    if (!known) throw Error(ErrorKind::Config, where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, where + "." + key + ": " + e.what());
  }
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(ErrorKind::Config, msg);
}

}  // namespace flowpose
