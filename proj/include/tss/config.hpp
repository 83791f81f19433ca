#pragma once
// Run configuration: a TOML file with sections
//
//   [model] [train] [ss] [decode] [elm] [synth]
//
// plus dotted-key overrides ("ss.lambda=0.5") applied on top. Unknown
// sections or keys are rejected with the offending key named.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tss/corpus.hpp"
#include "tss/decoding.hpp"
#include "tss/errors.hpp"
#include "tss/models.hpp"
#include "tss/training.hpp"

namespace tss {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  ElmTrainConfig elm;
  SynthSpec synth;

  // Runs every section's validation; ParameterError names the key.
  void validate() const;
};

class ConfigError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

// Defaults, then the TOML text.
RunConfig parse_config(std::string_view toml_text, std::string_view source = "config");
RunConfig load_config(const std::filesystem::path& file);

// "section.key=value"; the value is read as a TOML value, falling back to a
// bare string, so ss.level=utterance and ss.level="utterance" are equivalent.
void apply_override(RunConfig& cfg, std::string_view assignment);
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

// Every known key with its resolved value, grouped by section.
nlohmann::json config_to_json(const RunConfig& cfg);
// Same content as loadable TOML.
std::string config_to_toml(const RunConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace tss
