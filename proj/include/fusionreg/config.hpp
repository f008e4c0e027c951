#pragma once

// Run configuration: a flat "key = value" text file. Every key has a default;
// unknown keys are errors. '#' starts a comment.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fusionreg/losses.hpp"
#include "fusionreg/network.hpp"

namespace fusionreg {

struct OptimizerConfig {
  std::string name = "adam";
  double learning_rate = 1e-4;
  long long iterations = 2000;
  int batch_size = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// 0 disables intermediate checkpoints (the final one is always written).
  long long checkpoint_every = 500;
};

struct DataConfig {
  std::filesystem::path manifest;
  Dims target_shape{160, 224, 192};
  std::uint64_t seed = 0;
  std::string normalization = "minmax";
  std::string split = "train";
  /// Random axis flips applied identically to both images of a pair.
  bool augment_flips = false;
  /// Randomly exchanges moving and fixed.
  bool augment_swap = false;
};

struct OutputConfig {
  std::filesystem::path directory = "runs/default";
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  OptimizerConfig optimizer;
  DataConfig data;
  OutputConfig output;
  bool deterministic = false;
  /// Worker threads for evaluation; 0 picks the hardware concurrency.
  int threads = 0;

  /// Value checks only. check_paths additionally requires the manifest to exist.
  void validate(bool check_paths = false) const;
};

/// Throws ConfigError on unknown keys, malformed values or duplicates.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Sets one key from its text form (as in the file).
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
/// Every key, one per line, in a stable order; parse_run_config inverts it.
std::string to_text(const RunConfig& config);
std::vector<std::string> config_keys();

/// "160x224x192"
Dims parse_shape(const std::string& text);
std::string format_shape(const Dims& d);

}  // namespace fusionreg
