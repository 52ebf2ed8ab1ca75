#include "resbm/serialize.hpp"

#include "resbm/error.hpp"

namespace resbm {

namespace json_field {

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

[[noreturn]] void type_error(const std::string& where, const char* expected) {
  throw ConfigError(where + ": expected " + expected);
}

}  // namespace

const Json& object(const Json& obj, const std::string& key, const std::string& path) {
  const std::string where = join(path, key);
  if (!obj.is_object() || !obj.contains(key)) throw ConfigError(where + ": missing field");
  const Json& v = obj.at(key);
  if (!v.is_object()) type_error(where, "object");
  return v;
}

template <typename T>
T require(const Json& obj, const std::string& key, const std::string& path) {
  const std::string where = join(path, key);
  if (!obj.is_object() || !obj.contains(key)) throw ConfigError(where + ": missing field");
  const Json& v = obj.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) type_error(where, "boolean");
    return v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) type_error(where, "string");
    return v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) type_error(where, "number");
    return v.get<T>();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) type_error(where, "non-negative integer");
    return v.get<T>();
  } else {
    if (!v.is_number_integer()) type_error(where, "integer");
    return v.get<T>();
  }
}

template bool require<bool>(const Json&, const std::string&, const std::string&);
template std::string require<std::string>(const Json&, const std::string&, const std::string&);
template double require<double>(const Json&, const std::string&, const std::string&);
template std::size_t require<std::size_t>(const Json&, const std::string&, const std::string&);
template std::int64_t require<std::int64_t>(const Json&, const std::string&, const std::string&);

}  // namespace json_field

Json model_config_to_json(const model::ModelConfig& config) {
  Json bottleneck = Json::array();
  for (const auto& spec : config.bottleneck) {
    if (!spec) {
      bottleneck.push_back(nullptr);
    } else {
      bottleneck.push_back(
          Json{{"h", spec->h}, {"inner_dim", spec->inner_dim}, {"identity_codec", spec->identity_codec}});
    }
  }
  return Json{{"num_layers", config.num_layers},
              {"hidden_dim", config.hidden_dim},
              {"num_heads", config.num_heads},
              {"head_dim", config.head_dim},
              {"ffn_inner_dim", config.ffn_inner_dim},
              {"vocab_size", config.vocab_size},
              {"context_len", config.context_len},
              {"qk_norm", config.qk_norm},
              {"bottleneck", bottleneck}};
}

model::ModelConfig model_config_from_json(const Json& j, const std::string& path) {
  using json_field::optional;
  using json_field::require;
  if (!j.is_object()) throw ConfigError(path + ": expected object");
  model::ModelConfig c;
  c.num_layers = require<std::size_t>(j, "num_layers", path);
  c.hidden_dim = require<std::size_t>(j, "hidden_dim", path);
  c.num_heads = require<std::size_t>(j, "num_heads", path);
  if (c.num_heads == 0) throw ConfigError(path + ".num_heads: must be >= 1");
  c.head_dim = optional<std::size_t>(j, "head_dim", path, c.hidden_dim / c.num_heads);
  c.ffn_inner_dim = require<std::size_t>(j, "ffn_inner_dim", path);
  c.vocab_size = require<std::size_t>(j, "vocab_size", path);
  c.context_len = require<std::size_t>(j, "context_len", path);
  c.qk_norm = optional<bool>(j, "qk_norm", path, false);
  const std::string bpath = path + ".bottleneck";
  if (!j.contains("bottleneck") || !j.at("bottleneck").is_array()) {
    throw ConfigError(bpath + ": expected array with one entry per boundary");
  }
  const Json& arr = j.at("bottleneck");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = bpath + "[" + std::to_string(i) + "]";
    if (arr[i].is_null()) {
      c.bottleneck.emplace_back(std::nullopt);
      continue;
    }
    if (!arr[i].is_object()) throw ConfigError(where + ": expected object or null");
    model::BottleneckSpec spec;
    spec.h = require<std::size_t>(arr[i], "h", where);
    spec.identity_codec = optional<bool>(arr[i], "identity_codec", where, false);
    spec.inner_dim = optional<std::size_t>(arr[i], "inner_dim", where, c.hidden_dim / 4);
    c.bottleneck.emplace_back(spec);
  }
  c.validate();
  return c;
}

}  // namespace resbm
