#pragma once

#include "groundseq/model.hpp"
#include "groundseq/training.hpp"

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace groundseq {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Flat `key = value` text; `#` starts a comment, blank lines are ignored.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text);
KeyValues load_key_values(const std::filesystem::path& path);

enum class Precision { Float32, Float64 };

/// Effective settings for a training run.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  Precision precision = Precision::Float32;

  /// Stage defaults overlaid with `kv`; unknown keys are rejected.
  static RunConfig from_key_values(const KeyValues& kv, Stage stage);

  /// Every effective setting as key = value lines, sorted by key.
  std::string to_text() const;
};

/// "GROUND:0.5,CAPTION:0.5"
std::map<Task, double> parse_task_mix(const std::string& s);
std::string task_mix_string(const std::map<Task, double>& mix);

}  // namespace groundseq
