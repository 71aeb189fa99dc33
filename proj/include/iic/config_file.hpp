#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "iic/training.hpp"

// Run configuration files: INI-style sections [network], [train], [data],
// [loss]. Unknown sections or keys are errors; values are validated before
// any work starts.

namespace iic {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  NetworkConfig net;
  LossWeights weights;
  AdamConfig adam;
  int iterations = 1000;
  int batch_size = 1;
  std::uint64_t seed = 0;
  int eval_interval = 0;
  int checkpoint_interval = 0;  // 0 = final checkpoint only
  std::string manifest;         // training dataset
  std::string eval_manifest;    // optional held-out set

  TrainRunSpec train_spec() const {
    TrainRunSpec s;
    s.net = net;
    s.weights = weights;
    s.adam = adam;
    s.iterations = iterations;
    s.batch_size = batch_size;
    s.seed = seed;
    s.eval_interval = eval_interval;
    return s;
  }
};

namespace detail {

inline std::string config_trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T config_parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out;
  in >> out;
  std::string rest;
  if (!in || (in >> rest))
    throw ConfigError("config: bad value for " + key + ": '" + value + "'");
  return out;
}

inline bool config_parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + value + "'");
}

} // namespace detail

inline RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::config_trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config: malformed section at line " +
                                             std::to_string(lineno));
      section = t.substr(1, t.size() - 2);
      if (section != "network" && section != "train" && section != "data" &&
          section != "loss")
        throw ConfigError("config: unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
    const std::string key = detail::config_trim(t.substr(0, eq));
    const std::string value = detail::config_trim(t.substr(eq + 1));
    if (section.empty())
      throw ConfigError("config: key '" + key + "' outside any section");

    using detail::config_parse_bool;
    using detail::config_parse_number;
    if (section == "network") {
      if (key == "images") cfg.net.images = config_parse_number<int>(key, value);
      else if (key == "channels") cfg.net.channels = config_parse_number<int>(key, value);
      else if (key == "height") cfg.net.height = config_parse_number<int>(key, value);
      else if (key == "width") cfg.net.width = config_parse_number<int>(key, value);
      else if (key == "downscale") cfg.net.downscale = config_parse_bool(key, value);
      else if (key == "downscale_kind") {
        if (value == "haar") cfg.net.downscale_kind = DownscaleKind::haar;
        else if (value == "shuffle") cfg.net.downscale_kind = DownscaleKind::shuffle;
        else throw ConfigError("config: downscale_kind must be haar or shuffle");
      }
      else if (key == "embed_channels") cfg.net.embed_channels = config_parse_number<int>(key, value);
      else if (key == "coupling_blocks") cfg.net.coupling_blocks = config_parse_number<int>(key, value);
      else if (key == "dense_layers") cfg.net.dense.layers = config_parse_number<int>(key, value);
      else if (key == "dense_growth") cfg.net.dense.growth = config_parse_number<int>(key, value);
      else if (key == "dense_slope") cfg.net.dense.slope = config_parse_number<double>(key, value);
      else if (key == "dense_kernel") cfg.net.dense.kernel = config_parse_number<int>(key, value);
      else if (key == "relation_features") cfg.net.relation_features = config_parse_number<int>(key, value);
      else if (key == "reference_index") cfg.net.reference_index = config_parse_number<int>(key, value);
      else if (key == "disable_relation") cfg.net.disable_relation = config_parse_bool(key, value);
      else throw ConfigError("config: unknown key '" + key + "' in [network]");
    } else if (section == "train") {
      if (key == "iterations") cfg.iterations = config_parse_number<int>(key, value);
      else if (key == "batch_size") cfg.batch_size = config_parse_number<int>(key, value);
      else if (key == "seed") cfg.seed = config_parse_number<std::uint64_t>(key, value);
      else if (key == "lr") cfg.adam.lr = config_parse_number<double>(key, value);
      else if (key == "beta1") cfg.adam.beta1 = config_parse_number<double>(key, value);
      else if (key == "beta2") cfg.adam.beta2 = config_parse_number<double>(key, value);
      else if (key == "eps") cfg.adam.eps = config_parse_number<double>(key, value);
      else if (key == "eval_interval") cfg.eval_interval = config_parse_number<int>(key, value);
      else if (key == "checkpoint_interval") cfg.checkpoint_interval = config_parse_number<int>(key, value);
      else throw ConfigError("config: unknown key '" + key + "' in [train]");
    } else if (section == "data") {
      if (key == "manifest") cfg.manifest = value;
      else if (key == "eval_manifest") cfg.eval_manifest = value;
      else throw ConfigError("config: unknown key '" + key + "' in [data]");
    } else {  // loss
      if (key == "embedding") cfg.weights.embedding = config_parse_number<double>(key, value);
      else if (key == "frequency") cfg.weights.frequency = config_parse_number<double>(key, value);
      else if (key == "restoration") cfg.weights.restoration = config_parse_number<double>(key, value);
      else throw ConfigError("config: unknown key '" + key + "' in [loss]");
    }
  }

  try {
    cfg.net.validate();
    cfg.weights.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (cfg.iterations < 0) throw ConfigError("config: iterations must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  return parse_run_config(in);
}

} // namespace iic
