// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kele/editor.hpp"
#include "kele/trainer.hpp"
#include "kele/world.hpp"

namespace kele::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kIo = 3,
  kGateFailure = 4,
  kOptimizationFailure = 5,
  kArtifactMismatch = 6,
};

struct DatasetConfig {
  int n_instances = 100;
  int edits_per_instance = 1;
  std::uint64_t seed = 10;
};

struct EvalConfig {
  int neighbors = 5;
  double bin_width = 0.5;
  int cov_samples = 2000;
};

/// Every setting of a run. Defaults, then the config file, then flags.
struct RunConfig {
  std::uint64_t seed = 7;
  WorldConfig world;
  ModelConfig model;
  TrainConfig train;
  EditorConfig editor;
  DatasetConfig dataset;
  EvalConfig eval;

  RunConfig();
  /// Re-derives every module seed from one global seed.
  void set_seed(std::uint64_t s);
  nlohmann::json to_json() const;
  /// SHA-256 of to_json().dump().
  std::string checksum() const;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Applies an INI file ([run], [world], [model], [train], [editor], [dataset],
/// [eval] sections) on top of cfg. Unknown sections or keys are usage errors.
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Parses and runs one command line; returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace kele::cli
