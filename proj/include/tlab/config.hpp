#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tlab/model.hpp"

namespace tlab {

// Everything a run file can set: the model plus the data/optimizer knobs.
struct RunConfig {
  ModelConfig model = ModelConfig::proposed_defaults();
  std::size_t batch_size = 64;
  std::size_t warmup = 4000;
  double lr_scale = 1.0;
  std::size_t vocab_size = 8000;  // target size when vocabularies are learned
  double val_fraction = 0.1;      // held out when no validation file is given

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

struct ConfigField {
  std::string key;
  std::string default_value;
  std::string help;
};

// Every key accepted in a config file, with the proposed-variant defaults.
const std::vector<ConfigField>& config_fields();

// Applies one key/value pair. ConfigError names the key on unknown keys or
// malformed values.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

// Flat "key = value" lines; '#' starts a comment. A `variant` line resets
// the architecture fields to that variant's defaults before later keys
// apply, wherever it appears.
RunConfig parse_config(std::string_view text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

// Every key with its current value; parse_config(format_config(c)) == c.
std::string format_config(const RunConfig& config);
void save_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace tlab
