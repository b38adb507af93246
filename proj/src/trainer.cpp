// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/trainer.hpp"

#include <cmath>

#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

namespace kele {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
  if (batch_size < 1 || max_steps < 0 || eval_interval < 1) throw std::invalid_argument("TrainConfig: counts must be positive");
  if (recall_gate < 0.0 || recall_gate > 1.0 || composition_gate < 0.0 || composition_gate > 1.0) {
    throw std::invalid_argument("TrainConfig: gates must lie in [0, 1]");
  }
  if (subject_ffn_dropout < 0.0 || subject_ffn_dropout > 1.0) {
    throw std::invalid_argument("TrainConfig: subject_ffn_dropout must lie in [0, 1]");
  }
  if (prefix_probability < 0.0 || prefix_probability > 1.0 || max_prefix < 1) {
    throw std::invalid_argument("TrainConfig: bad prefix augmentation settings");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},         {"recall_gate", c.recall_gate},
       {"composition_gate", c.composition_gate}, {"eval_interval", c.eval_interval},
       {"seed", c.seed},                   {"rms_decay", c.rms_decay},
       {"rms_eps", c.rms_eps},             {"weight_decay", c.weight_decay},             {"prefix_probability", c.prefix_probability},
       {"max_prefix", c.max_prefix}, {"identity_hops", c.identity_hops}, {"subject_ffn_dropout", c.subject_ffn_dropout}};
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  j = {{"final_loss", r.final_loss},
       {"recall_accuracy", r.recall_accuracy},
       {"composition_accuracy", r.composition_accuracy},
       {"steps", r.steps},
       {"recall_pass", r.recall_pass},
       {"composition_pass", r.composition_pass},
       {"pass", r.pass},
       {"loss_history", r.loss_history}};
}

std::vector<TrainingExample> training_corpus(const World& world, bool identity_hops) {
  std::vector<TrainingExample> out;
  for (int tmpl = 0; tmpl < 2; ++tmpl) {
    for (const Fact& f : world.facts()) {
      out.push_back({render_prompt(world, f.subject, f.relation, tmpl), world.entity_token(f.object), true,
                     subject_position(tmpl)});
    }
  }
  if (identity_hops) {
    for (const Fact& f : world.facts()) {
      out.push_back({render_identity_hop(world, f.subject, f.relation, true), world.entity_token(f.object)});
      out.push_back({render_identity_hop(world, f.subject, f.relation, false), world.entity_token(f.object)});
    }
  }
  for (const Chain& c : world.training_chains()) {
    out.push_back({render_multihop(world, c), world.entity_token(c.second.object)});
  }
  return out;
}

namespace {

double greedy_accuracy(const Model& model, const std::vector<Tokens>& prompts, const std::vector<TokenId>& answers) {
  if (prompts.empty()) throw std::invalid_argument("empty evaluation set");
  const Matrix logits = batch_last_logits(model, prompts);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    hits += argmax_token(logits.col(static_cast<Eigen::Index>(i))) == answers[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(prompts.size());
}

}  // namespace

double fact_recall_accuracy(const Model& model, const World& world, std::span<const Fact> facts, int template_id) {
  std::vector<Tokens> prompts;
  std::vector<TokenId> answers;
  for (const Fact& f : facts) {
    prompts.push_back(render_prompt(world, f.subject, f.relation, template_id));
    answers.push_back(world.entity_token(f.object));
  }
  return greedy_accuracy(model, prompts, answers);
}

double chain_accuracy(const Model& model, const World& world, std::span<const Chain> chains) {
  std::vector<Tokens> prompts;
  std::vector<TokenId> answers;
  for (const Chain& c : chains) {
    prompts.push_back(render_multihop(world, c));
    answers.push_back(world.entity_token(c.second.object));
  }
  return greedy_accuracy(model, prompts, answers);
}

TrainReport train(Model& model, const World& world, const TrainConfig& config, const TrainProgress& progress) {
  config.validate();
  if (model.config.vocab_size < world.vocab_size()) {
    throw std::invalid_argument("train: model vocabulary " + std::to_string(model.config.vocab_size) +
                                " does not cover world vocabulary " + std::to_string(world.vocab_size()));
  }
  const std::vector<TrainingExample> corpus = training_corpus(world, config.identity_hops);
  const std::vector<Chain> held_out = world.held_out_chains();

  boost::random::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  auto reshuffle = [&] {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = boost::random::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
      std::swap(order[i - 1], order[j]);
    }
    cursor = 0;
  };
  boost::random::bernoulli_distribution<double> use_prefix(config.prefix_probability);
  boost::random::uniform_int_distribution<int> prefix_len(1, config.max_prefix);
  boost::random::uniform_int_distribution<int> prefix_token(kNumControlTokens, world.vocab_size() - 1);
  boost::random::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n_layers = model.config.n_layers;

  auto params = model.parameters();
  std::vector<Matrix> second_moment;
  for (const auto& [name, m] : params) second_moment.push_back(Matrix::Zero(m->rows(), m->cols()));

  TrainReport report;
  auto evaluate = [&](int step) {
    report.steps = step;
    report.recall_accuracy = fact_recall_accuracy(model, world, world.facts(), 0);
    report.composition_accuracy = held_out.empty() ? 1.0 : chain_accuracy(model, world, held_out);
    report.recall_pass = report.recall_accuracy >= config.recall_gate;
    report.composition_pass = report.composition_accuracy >= config.composition_gate;
    report.pass = report.recall_pass && report.composition_pass;
  };

  double interval_loss = 0.0;
  int interval_count = 0;
  for (int step = 1; step <= config.max_steps; ++step) {
    Batch batch;
    std::vector<Eigen::Index> targets;
    // Per example: column of the only token whose FFN stays on, or -1.
    std::vector<Eigen::Index> keep;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) reshuffle();
      const TrainingExample& ex = corpus[order[cursor++]];
      Tokens seq;
      if (use_prefix(rng)) {
        const int n = prefix_len(rng);
        seq.push_back(kBos);
        for (int i = 1; i < n; ++i) seq.push_back(prefix_token(rng));
      }
      seq.insert(seq.end(), ex.prompt.begin(), ex.prompt.end());
      if (static_cast<int>(seq.size()) > model.config.max_seq) seq.erase(seq.begin(), seq.end() - static_cast<long>(ex.prompt.size()));
      batch.add(seq);
      targets.push_back(ex.answer);
      Eigen::Index kept = -1;
      if (config.subject_ffn_dropout > 0.0 && ex.single_hop && unit(rng) < config.subject_ffn_dropout) {
        kept = static_cast<Eigen::Index>(seq.size() - ex.prompt.size()) + ex.subject_index;
      }
      keep.push_back(kept);
    }
    std::vector<Matrix> gates;
    if (config.subject_ffn_dropout > 0.0) {
      const auto cols = static_cast<Eigen::Index>(batch.tokens.size());
      gates.assign(static_cast<std::size_t>(n_layers), Matrix::Ones(model.config.d_model, cols));
      for (std::size_t s = 0; s < batch.segments.size(); ++s) {
        if (keep[s] < 0) continue;
        const Segment& seg = batch.segments[s];
        for (Matrix& g : gates) {
          g.middleCols(seg.start, seg.length).setZero();
          g.col(seg.start + keep[s]).setOnes();
        }
      }
    }

    Tape tape;
    ParamVars vars = bind_leaves(tape, model);
    GraphOutputs g = build_forward(tape, model, vars, batch, {}, Readout::kLast, gates);
    Var loss = ad::nll_cols(ad::log_softmax_cols(g.logits), std::move(targets));
    const double loss_value = loss.scalar();
    if (!std::isfinite(loss_value)) throw TrainingError(step, "loss is not finite");
    tape.backward(loss);

    for (std::size_t p = 0; p < params.size(); ++p) {
      const Matrix& grad = tape.grad(vars.leaves[p]);
      Matrix& v = second_moment[p];
      v = config.rms_decay * v + (1.0 - config.rms_decay) * grad.cwiseAbs2();
      Matrix& w = *params[p].second;
      if (config.weight_decay > 0.0 && w.cols() > 1) w *= 1.0 - config.learning_rate * config.weight_decay;
      w -= config.learning_rate * (grad.array() / (v.array().sqrt() + config.rms_eps)).matrix();
    }
    if (!params.front().second->allFinite()) throw TrainingError(step, "parameters are not finite");

    report.final_loss = loss_value;
    interval_loss += loss_value;
    ++interval_count;
    if (step % config.eval_interval == 0 || step == config.max_steps) {
      report.loss_history.push_back(interval_loss / interval_count);
      interval_loss = 0.0;
      interval_count = 0;
      evaluate(step);
      if (progress) progress(step, report.loss_history.back(), report.recall_accuracy, report.composition_accuracy);
      if (report.pass) return report;
    }
  }
  if (config.max_steps == 0) evaluate(0);
  return report;
}

}  // namespace kele
