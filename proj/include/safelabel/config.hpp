#ifndef SAFELABEL_CONFIG_HPP
#define SAFELABEL_CONFIG_HPP

#include <filesystem>
#include <string>

#include <json.hpp>
#include <toml.hpp>

#include "safelabel/error.hpp"
#include "safelabel/io.hpp"

namespace safelabel {

namespace detail {

inline nlohmann::json toml_node_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [key, value] : *t) j[std::string(key.str())] = toml_node_to_json(value);
    return j;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& value : *a) j.push_back(toml_node_to_json(value));
    return j;
  }
  if (const auto* s = node.as_string()) return s->get();
  if (const auto* i = node.as_integer()) return i->get();
  if (const auto* f = node.as_floating_point()) return f->get();
  if (const auto* b = node.as_boolean()) return b->get();
  throw ValidationError("unsupported TOML value (dates and times are not accepted)");
}

}  // namespace detail

inline nlohmann::json parse_toml(const std::string& text, const std::string& source = "config") {
  try {
    return detail::toml_node_to_json(toml::parse(text, source));
  } catch (const toml::parse_error& e) {
    throw ValidationError("TOML parse error in " + source + ": " + std::string(e.description()));
  }
}

/// Reads a config file as JSON. `.toml` and `.json` decide the format;
/// other extensions try JSON first, then TOML.
inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  const std::string text = io::read_file(path);
  const auto ext = path.extension().string();
  if (ext == ".toml") return parse_toml(text, path.string());
  auto parsed = nlohmann::json::parse(text, nullptr, false);
  if (!parsed.is_discarded()) {
    if (!parsed.is_object()) throw ValidationError("config " + path.string() + " must be an object");
    return parsed;
  }
  if (ext == ".json") throw ValidationError("JSON parse error in " + path.string());
  return parse_toml(text, path.string());
}

}  // namespace safelabel

#endif
