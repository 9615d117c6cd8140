#pragma once

// Flat `key = value` configuration covering every tunable of a run.

#include "uwloc/features.hpp"
#include "uwloc/learn.hpp"
#include "uwloc/net.hpp"
#include "uwloc/synthgen.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uwloc {

struct RunConfig {
  Scenario scenario;  // interferer is taken from the two fields below
  bool interferer_enabled = false;
  Interferer interferer{{60.0, 120.0, 180.0}};
  FeatureConfig features;
  AgcSetting agc;
  NetConfig net;  // input shape is taken from the data, not from here
  Hyper train;
  int finetune_epochs = 0;  // 0 = train.epochs / 4
};

/// The scenario with the interferer attached when enabled.
Scenario resolved_scenario(const RunConfig& cfg);

/// Sets one key. Throws usage_error for unknown keys or unparsable values.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);
std::vector<std::string> config_keys();

/// Applies `key=value` strings in order.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

/// One `key = value` line per key, sorted, round-trips through parse_run_config.
std::string to_text(const RunConfig& cfg);
RunConfig parse_run_config(const std::string& text);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Runs every module's validation on the resolved config.
void validate(const RunConfig& cfg);

}  // namespace uwloc
