#pragma once

// Layered run configuration: built-in defaults, then a JSON file, then
// AVEMO_* environment variables, then command-line overrides. Keys are
// dotted ("train.max_steps"); the environment name of a key is AVEMO_ plus
// the key upper-cased with dots turned into underscores
// (AVEMO_TRAIN_MAX_STEPS). Unknown keys and values of the wrong type are
// ConfigErrors. A null default means "derived later" (stage defaults); the
// resolved copy that gets saved must have no nulls left.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "avemo/error.hpp"
#include "avemo/hash.hpp"
#include "avemo/tensor.hpp"

namespace avemo {

class RunConfig {
 public:
  using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;

  static nlohmann::json defaults() {
    using nlohmann::json;
    return {
        {"model", {{"preset", "tiny"}, {"seed", 0}}},
        {"data", {{"manifest", ""}, {"cache", ""}}},
        {"synth", {{"seed", 0}, {"dialogues", 8}, {"rounds", 2}, {"split", "train"}, {"out", ""}}},
        {"preprocess", {{"workers", 1}, {"frame_stride", 10}}},
        {"train",
         {{"stage", 3},
          {"init", ""},
          {"out", ""},
          {"objectives", nullptr},
          {"modality", "av"},
          {"max_steps", nullptr},
          {"batch_size", nullptr},
          {"peak_lr", nullptr},
          {"min_lr", nullptr},
          {"warmup_steps", nullptr},
          {"weight_decay", 0.01},
          {"eval_every", 50},
          {"loss_reduction", "mean_per_token"},
          {"full_metadata", false},
          {"target_loss", 0.0},
          {"seed", 0},
          {"metrics_log", ""}}},
        {"eval",
         {{"checkpoint", ""},
          {"turns_per_dialogue", 4},
          {"seed", 0},
          {"decode", "greedy"},
          {"top_p", 0.9},
          {"temperature", 1.0},
          {"max_new", 160},
          {"modality", "av"},
          {"out", ""}}},
        {"serve",
         {{"checkpoint", ""},
          {"host", "127.0.0.1"},
          {"port", 8080},
          {"reserve", 256},
          {"max_new", 160},
          {"ttl_seconds", 3600},
          {"timeout_ms", 60000},
          {"max_queue", 8},
          {"media_dir", ""},
          {"snapshot_dir", ""},
          {"token", ""}}},
    };
  }

  static std::optional<std::string> process_env(const std::string& name) {
    if (const char* v = std::getenv(name.c_str())) return std::string(v);
    return std::nullopt;
  }

  static std::string env_name(const std::string& key) {
    std::string s = "AVEMO_";
    for (char c : key) s += c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
  }

  static RunConfig resolve(const std::optional<std::filesystem::path>& file,
                           const std::map<std::string, std::string>& overrides, const EnvLookup& env = process_env) {
    RunConfig rc;
    rc.values_ = defaults();
    if (file) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(read_file(*file));
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::kConfigError, file->string() + ": " + e.what());
      } catch (const Error& e) {
        fail(ErrorCode::kConfigError, e.message());
      }
      if (!j.is_object()) fail(ErrorCode::kConfigError, file->string() + ": top level must be an object");
      for (const auto& [section, body] : j.items()) {
        if (!body.is_object()) fail(ErrorCode::kConfigError, "section '" + section + "' must be an object");
        for (const auto& [k, v] : body.items()) rc.assign(section + "." + k, v);
      }
    }
    for (const auto& key : rc.keys())
      if (auto v = env(env_name(key))) rc.set_text(key, *v);
    for (const auto& [k, v] : overrides) rc.set_text(k, v);
    return rc;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [section, body] : values_.items())
      for (const auto& [k, v] : body.items()) out.push_back(section + "." + k);
    return out;
  }

  bool has(const std::string& key) const { return !slot(key).is_null(); }

  template <class T>
  T get(const std::string& key) const {
    const auto& v = slot(key);
    if (v.is_null()) fail(ErrorCode::kConfigError, "'" + key + "' is unresolved");
    return v.get<T>();
  }
  std::string str(const std::string& key) const { return get<std::string>(key); }

  /// Sets a value from text, typed after the default of that key. Keys whose
  /// default is null take JSON literals, falling back to plain strings.
  void set_text(const std::string& key, const std::string& text) {
    const auto& d = default_of(key);
    nlohmann::json v;
    try {
      if (d.is_string()) v = text;
      else if (d.is_boolean()) {
        if (text == "true" || text == "1") v = true;
        else if (text == "false" || text == "0") v = false;
        else throw std::invalid_argument("bool");
      } else if (d.is_number_integer()) {
        std::size_t used = 0;
        v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument("int");
      } else if (d.is_number()) {
        std::size_t used = 0;
        v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("real");
      } else {
        v = nlohmann::json::parse(text, nullptr, false);
        if (v.is_discarded()) v = text;
      }
    } catch (const std::exception&) {
      fail(ErrorCode::kConfigError, "'" + key + "': cannot use '" + text + "' as " + std::string(d.type_name()));
    }
    assign(key, v);
  }

  /// Fills a value that was left to be derived.
  void resolve_default(const std::string& key, const nlohmann::json& v) {
    if (slot(key).is_null()) slot_mut(key) = v;
  }

  /// The section as an explicit object; throws if any key is unresolved.
  nlohmann::json resolved(const std::string& section) const {
    const auto& s = values_.at(section);
    for (const auto& [k, v] : s.items())
      if (v.is_null()) fail(ErrorCode::kConfigError, "'" + section + "." + k + "' is unresolved");
    return s;
  }
  const nlohmann::json& json() const { return values_; }
  std::string hash(const std::string& section) const { return sha256_hex(resolved(section).dump()); }

 private:
  static std::pair<std::string, std::string> split(const std::string& key) {
    const auto dot = key.find('.');
    if (dot == std::string::npos) fail(ErrorCode::kConfigError, "config keys look like section.name: " + key);
    return {key.substr(0, dot), key.substr(dot + 1)};
  }
  static const nlohmann::json& default_of(const std::string& key) {
    static const nlohmann::json d = defaults();
    const auto [s, k] = split(key);
    if (!d.contains(s) || !d[s].contains(k)) fail(ErrorCode::kConfigError, "unknown config key '" + key + "'");
    return d[s][k];
  }
  const nlohmann::json& slot(const std::string& key) const {
    default_of(key);
    const auto [s, k] = split(key);
    return values_.at(s).at(k);
  }
  nlohmann::json& slot_mut(const std::string& key) {
    default_of(key);
    const auto [s, k] = split(key);
    return values_[s][k];
  }
  void assign(const std::string& key, const nlohmann::json& v) {
    const auto& d = default_of(key);
    const bool ok = d.is_null() || v.is_null() || (d.is_string() && v.is_string()) ||
                    (d.is_boolean() && v.is_boolean()) || (d.is_number_integer() && v.is_number_integer()) ||
                    (d.is_number_float() && v.is_number());
    if (!ok) fail(ErrorCode::kConfigError, "'" + key + "' expects " + std::string(d.type_name()));
    slot_mut(key) = d.is_number_float() && v.is_number() ? nlohmann::json(v.get<double>()) : v;
  }

  nlohmann::json values_;
};

}  // namespace avemo
