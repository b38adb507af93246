// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "kele/model.hpp"
#include "kele/world.hpp"

namespace kele {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int max_steps = 40000;
  double recall_gate = 0.98;
  double composition_gate = 0.70;
  int eval_interval = 500;
  std::uint64_t seed = 1;
  /// Squared-gradient running-average decay.
  double rms_decay = 0.99;
  double rms_eps = 1e-8;
  /// Decoupled weight decay applied to matrices (not gains/biases).
  double weight_decay = 0.0;
  /// Probability that a training example is preceded by a random prefix
  /// [BOS, t1 .. t_{n-1}] with n uniform in [1, max_prefix].
  double prefix_probability = 0.5;
  int max_prefix = 5;
  /// Adds both identity-hop renderings of every fact to the corpus.
  bool identity_hops = false;
  /// Probability that a single-hop example runs with every FFN output
  /// disabled except at the subject token, so recall has to go through the
  /// subject's own residual stream.
  double subject_ffn_dropout = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

struct TrainReport {
  double final_loss = 0.0;
  double recall_accuracy = 0.0;
  double composition_accuracy = 0.0;
  int steps = 0;
  bool recall_pass = false;
  bool composition_pass = false;
  bool pass = false;
  /// Mean training loss over each eval interval.
  std::vector<double> loss_history;

  bool operator==(const TrainReport&) const = default;
};

void to_json(nlohmann::json& j, const TrainReport& r);

class TrainingError : public std::runtime_error {
 public:
  TrainingError(int step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  int step() const { return step_; }

 private:
  int step_;
};

struct TrainingExample {
  Tokens prompt;
  TokenId answer = 0;
  bool single_hop = false;
  int subject_index = -1;  // position of s inside prompt (single-hop only)
};

/// Single-hop prompts under both templates, optional identity hops, and
/// training-split two-hop prompts.
std::vector<TrainingExample> training_corpus(const World& world, bool identity_hops = false);

using TrainProgress = std::function<void(int step, double loss, double recall, double composition)>;

/// Trains in place. Deterministic for a given model, world and config.
TrainReport train(Model& model, const World& world, const TrainConfig& config, const TrainProgress& progress = {});

/// Fraction of facts whose greedy next token after render_prompt(fact) is the object.
double fact_recall_accuracy(const Model& model, const World& world, std::span<const Fact> facts, int template_id = 0);

/// Fraction of chains whose greedy answer to render_multihop is the second-hop object.
double chain_accuracy(const Model& model, const World& world, std::span<const Chain> chains);

}  // namespace kele
