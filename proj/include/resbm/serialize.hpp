#pragma once

#include <string>

#include "json.hpp"
#include "resbm/model.hpp"

namespace resbm {

using Json = nlohmann::json;

namespace json_field {

/// Reads `obj[key]` as T; missing or mistyped fields raise ConfigError with
/// the dotted path, e.g. "model.hidden_dim: expected unsigned integer".
template <typename T>
T require(const Json& obj, const std::string& key, const std::string& path);

template <typename T>
T optional(const Json& obj, const std::string& key, const std::string& path, T fallback) {
  if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
  return require<T>(obj, key, path);
}

const Json& object(const Json& obj, const std::string& key, const std::string& path);

}  // namespace json_field

Json model_config_to_json(const model::ModelConfig& config);
/// Parses and validates; errors name the field under `path`.
model::ModelConfig model_config_from_json(const Json& j, const std::string& path = "model");

}  // namespace resbm
