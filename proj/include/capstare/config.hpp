// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: line-oriented "key = value" text with sections model.,
// train., data. and out.; '#' starts a comment. Command-line flags of the
// form --key=value override file values.
#pragma once

#include <string>
#include <vector>

#include "capstare/data.hpp"
#include "capstare/model.hpp"
#include "capstare/training.hpp"

namespace capstare {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | directory
  std::string path;                  // required for source = directory
  SyntheticSpec synthetic;           // image size comes from model.image_size
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string out_dir = "out";

  /// Model initialisation seed, derived from train.seed.
  std::uint64_t init_seed() const;
  /// ConfigError on invalid values or a missing required key.
  void validate() const;
};

/// Every recognised key in echo order.
std::vector<std::string> config_keys();
/// Closest recognised key by edit distance.
std::string nearest_key(const std::string& key);

/// Sets one key; `where` prefixes error messages (e.g. "run.cfg line 3").
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value, const std::string& where);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

RunConfig parse_config_text(const std::string& text, const std::string& origin, RunConfig base = {});
RunConfig load_config(const std::string& path);
/// Accepts "--key=value" or "key=value".
void apply_flag(RunConfig& cfg, const std::string& flag);

/// Full effective configuration; parse_config_text(echo_config(c)) == c.
std::string echo_config(const RunConfig& cfg);
bool same_config(const RunConfig& a, const RunConfig& b);

/// Dataset described by cfg.data, split into (train, validation).
std::pair<std::vector<Sequence>, std::vector<Sequence>> load_run_data(const RunConfig& cfg);
SyntheticSpec synthetic_spec(const RunConfig& cfg);

}  // namespace capstare
