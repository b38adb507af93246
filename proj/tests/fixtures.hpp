// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small shared fixtures: a tiny world and a model trained on it once per
// test process.

#pragma once

#include <filesystem>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "kele/model.hpp"
#include "kele/trainer.hpp"
#include "kele/world.hpp"

namespace kele::testing {

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  boost::random::mt19937_64 rng(seed);
  boost::random::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

inline ModelConfig tiny_config(int vocab = 24, std::uint64_t seed = 5) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.d_ffn = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq = 12;
  c.seed = seed;
  return c;
}

inline WorldConfig small_world_config() {
  WorldConfig w;
  w.seed = 3;
  w.n_entities = 24;
  w.n_relations = 3;
  w.n_facts = 40;
  w.n_chains = 20;
  w.n_held_out = 4;
  return w;
}

inline const World& small_world() {
  static const World w = generate_world(small_world_config());
  return w;
}

/// Model trained to full single-hop recall on small_world().
inline const Model& small_trained_model() {
  static const Model m = [] {
    const World& w = small_world();
    ModelConfig c;
    c.vocab_size = w.vocab_size();
    c.d_model = 32;
    c.d_ffn = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.max_seq = 16;
    c.seed = 11;
    Model model = Model::init(c);
    TrainConfig tc;
    tc.max_steps = 1500;
    tc.eval_interval = 100;
    tc.learning_rate = 3e-3;
    tc.batch_size = 32;
    tc.composition_gate = 0.0;
    tc.recall_gate = 1.0;
    train(model, w, tc);
    return model;
  }();
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("kele_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kele::testing
