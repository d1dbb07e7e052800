// Run configuration: strict-schema JSON config files with dotted-key
// command-line overrides.
#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsep/model.hpp"
#include "mixsep/train.hpp"

namespace mixsep::config {

struct RunConfig {
  std::string method = "pit";
  unsigned seed = 1;
  std::string train_manifest;
  std::string val_manifest;
  int sample_rate = 8000;
  double segment_seconds = 3.0;
  ModelConfig model;
  train::TrainConfig trainer;

  nlohmann::json snapshot;  // fully-resolved config as written to the run dir
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                       const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw std::invalid_argument("config: unknown key '" + scope + it.key() + "'");
  }
}

template <typename T>
inline void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json default_config_json() {
  return nlohmann::json{
      {"method", "pit"},
      {"seed", 1},
      {"data",
       {{"train_manifest", ""}, {"val_manifest", ""}, {"sample_rate", 8000}, {"segment_seconds", 3.0}}},
      {"model",
       {{"repeats", 3},
        {"dilations_per_block", 4},
        {"channels", 64},
        {"hidden", 64},
        {"window_size", 512},
        {"hop_size", 128}}},
      {"train",
       {{"batch_size", 128},
        {"lr", 1e-3},
        {"max_epochs", 100},
        {"early_stop_patience", 10},
        {"grad_clip_norm", 5.0},
        {"mixpit_warmstart_epochs", 50},
        {"snr_max", 30.0},
        {"n_threads", 0}}}};
}

// Applies "a.b.c=value" overrides onto the JSON tree. Values parse as JSON
// when possible, otherwise as strings.
inline void apply_override(nlohmann::json& j, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override must be key=value: " + kv);
  std::string key = kv.substr(0, eq);
  std::string val = kv.substr(eq + 1);
  nlohmann::json* node = &j;
  std::size_t pos = 0;
  while (true) {
    auto dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(val);
      } catch (...) {
        parsed = val;
      }
      (*node)[part] = parsed;
      break;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

inline RunConfig parse_run_config(nlohmann::json j) {
  detail::check_keys(j, {"method", "seed", "data", "model", "train"}, "");
  RunConfig c;
  detail::get_if(j, "method", c.method);
  detail::get_if(j, "seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, {"train_manifest", "val_manifest", "sample_rate", "segment_seconds"}, "data.");
    detail::get_if(d, "train_manifest", c.train_manifest);
    detail::get_if(d, "val_manifest", c.val_manifest);
    detail::get_if(d, "sample_rate", c.sample_rate);
    detail::get_if(d, "segment_seconds", c.segment_seconds);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m, {"repeats", "dilations_per_block", "channels", "hidden", "window_size", "hop_size"},
                       "model.");
    detail::get_if(m, "repeats", c.model.repeats);
    detail::get_if(m, "dilations_per_block", c.model.dilations_per_block);
    detail::get_if(m, "channels", c.model.channels);
    detail::get_if(m, "hidden", c.model.hidden);
    detail::get_if(m, "window_size", c.model.stft.window_size);
    detail::get_if(m, "hop_size", c.model.stft.hop_size);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t,
                       {"batch_size", "lr", "max_epochs", "early_stop_patience", "grad_clip_norm",
                        "mixpit_warmstart_epochs", "snr_max", "n_threads"},
                       "train.");
    std::size_t bs = c.trainer.batch_size;
    detail::get_if(t, "batch_size", bs);
    c.trainer.batch_size = bs;
    detail::get_if(t, "lr", c.trainer.lr);
    detail::get_if(t, "max_epochs", c.trainer.max_epochs);
    detail::get_if(t, "early_stop_patience", c.trainer.early_stop_patience);
    detail::get_if(t, "grad_clip_norm", c.trainer.grad_clip_norm);
    detail::get_if(t, "mixpit_warmstart_epochs", c.trainer.mixpit_warmstart_epochs);
    detail::get_if(t, "snr_max", c.trainer.loss.snr_max);
    detail::get_if(t, "n_threads", c.trainer.n_threads);
  }
  c.model.sample_rate = c.sample_rate;
  c.trainer.method = train::method_from_string(c.method);
  c.trainer.seed = c.seed;
  c.trainer.segment_length = std::size_t(c.segment_seconds * c.sample_rate);
  c.trainer.validate();
  c.model.validate();
  c.snapshot = std::move(j);
  return c;
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = default_config_json();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config: " + path);
    nlohmann::json file_json = nlohmann::json::parse(f);
    j.merge_patch(file_json);
  }
  for (const auto& kv : overrides) apply_override(j, kv);
  return parse_run_config(j);
}

}  // namespace mixsep::config
