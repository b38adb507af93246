// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/editor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <boost/random/discrete_distribution.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include "kele/trainer.hpp"
#include "kele/util.hpp"

namespace kele {

std::string to_string(EditMode mode) { return mode == EditMode::kKele ? "kele" : "rome"; }

EditMode edit_mode_from_string(const std::string& s) {
  if (s == "kele") return EditMode::kKele;
  if (s == "rome") return EditMode::kRomeBaseline;
  throw std::invalid_argument("unknown edit mode \"" + s + "\" (expected kele or rome)");
}

void EditorConfig::validate() const {
  if (layer < 0) throw std::invalid_argument("EditorConfig: layer must be non-negative");
  if (margin_rank < 0) throw std::invalid_argument("EditorConfig: margin rank k must be >= 0");
  if (!(anchor_weight >= 0.0)) throw std::invalid_argument("EditorConfig: lambda must be >= 0");
  if (n_prefixes < 1) throw std::invalid_argument("EditorConfig: prefix count must be >= 1");
  if (prefix_lengths.empty()) throw std::invalid_argument("EditorConfig: prefix length list is empty");
  for (int len : prefix_lengths) {
    if (len < 0) throw std::invalid_argument("EditorConfig: negative prefix length");
  }
  if (steps < 0 || !(step_size > 0.0) || !(clip_norm > 0.0)) {
    throw std::invalid_argument("EditorConfig: optimizer settings must be positive");
  }
  if (!(ridge_scale > 0.0)) throw std::invalid_argument("EditorConfig: ridge scale must be > 0");
}

void to_json(nlohmann::json& j, const EditorConfig& c) {
  j = {{"layer", c.layer},
       {"k", c.margin_rank},
       {"lambda", c.anchor_weight},
       {"n_prefixes", c.n_prefixes},
       {"prefix_lengths", c.prefix_lengths},
       {"steps", c.steps},
       {"step_size", c.step_size},
       {"clip_norm", c.clip_norm},
       {"ridge_scale", c.ridge_scale},
       {"mode", to_string(c.mode)},
       {"margin_rule", c.margin_rule == MarginRule::kLiteral ? "literal" : "exclude_target"},
       {"seed", c.seed}};
}

// ---------------------------------------------------------------------------

CovarianceEstimate covariance_from_keys(const Matrix& keys, double ridge) {
  if (keys.cols() == 0) throw std::invalid_argument("covariance: no keys");
  if (!(ridge >= 0.0)) throw std::invalid_argument("covariance: ridge must be >= 0");
  const Eigen::Index d = keys.rows();
  Matrix c = Matrix::Zero(d, d);
  c.selfadjointView<Eigen::Lower>().rankUpdate(keys);
  c = c.selfadjointView<Eigen::Lower>();
  c /= static_cast<double>(keys.cols());
  c.diagonal().array() += ridge;
  return CovarianceEstimate{std::move(c), keys.cols(), keys.cols(), ridge};
}

namespace {

std::vector<Tokens> covariance_prompt_pool(const World& world) {
  std::vector<Tokens> pool;
  for (const TrainingExample& ex : training_corpus(world)) pool.push_back(ex.prompt);
  for (const Chain& c : world.held_out_chains()) pool.push_back(render_multihop(world, c));
  for (EntityId e = 0; e < world.n_entities(); ++e) pool.push_back(render_anchor(world, e));
  return pool;
}

}  // namespace

CovarianceEstimate estimate_covariance(const Model& model, int layer, const World& world, int n_samples,
                                       std::optional<double> ridge, std::uint64_t seed, double ridge_scale) {
  if (n_samples <= 0) throw std::invalid_argument("estimate_covariance: n_samples must be positive");
  if (layer < 0 || layer >= model.config.n_layers) throw std::out_of_range("estimate_covariance: layer out of range");
  const std::vector<Tokens> pool = covariance_prompt_pool(world);
  boost::random::mt19937_64 rng(seed);
  boost::random::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

  const Eigen::Index d = model.config.d_ffn;
  Matrix acc = Matrix::Zero(d, d);
  long n_keys = 0;
  constexpr int kChunk = 256;
  for (int begin = 0; begin < n_samples; begin += kChunk) {
    const int end = std::min(n_samples, begin + kChunk);
    Batch batch;
    for (int i = begin; i < end; ++i) batch.add(pool[pick(rng)]);
    Tape tape;
    ParamVars params = bind_constants(tape, model);
    GraphOutputs g = build_forward(tape, model, params, batch, {}, Readout::kLast);
    const Matrix& keys = g.keys[static_cast<std::size_t>(layer)].value();
    acc.selfadjointView<Eigen::Lower>().rankUpdate(keys);
    n_keys += keys.cols();
  }
  Matrix c = acc.selfadjointView<Eigen::Lower>();
  c /= static_cast<double>(n_keys);
  const double eps = ridge ? *ridge : ridge_scale * c.trace() / static_cast<double>(d);
  if (!(eps >= 0.0)) throw std::invalid_argument("estimate_covariance: ridge must be >= 0");
  c.diagonal().array() += eps;
  return CovarianceEstimate{std::move(c), n_samples, n_keys, eps};
}

CovarianceEstimate cached_covariance(const std::filesystem::path& cache_dir, const Model& model, int layer,
                                     const World& world, int n_samples, std::uint64_t seed, double ridge_scale) {
  std::ostringstream key;
  key << model.checksum() << '|' << sha256_hex(world_to_json(world).dump()) << '|' << layer << '|' << n_samples << '|'
      << seed << '|' << ridge_scale;
  const std::filesystem::path file = cache_dir / ("cov-" + sha256_hex(key.str()).substr(0, 24) + ".json");
  if (std::filesystem::exists(file)) {
    const nlohmann::json j = nlohmann::json::parse(read_file(file));
    const auto d = j.at("dim").get<Eigen::Index>();
    const Vector flat = decode_f64_base64(j.at("c").get<std::string>());
    if (flat.size() != d * d) throw IoError("covariance cache " + file.string() + " is corrupt");
    CovarianceEstimate est;
    est.c = flat.reshaped(d, d);
    est.n_samples = j.at("n_samples").get<long>();
    est.n_keys = j.at("n_keys").get<long>();
    est.ridge = j.at("ridge").get<double>();
    return est;
  }
  CovarianceEstimate est = estimate_covariance(model, layer, world, n_samples, std::nullopt, seed, ridge_scale);
  std::filesystem::create_directories(cache_dir);
  const nlohmann::json j = {{"dim", est.c.rows()},
                            {"n_samples", est.n_samples},
                            {"n_keys", est.n_keys},
                            {"ridge", est.ridge},
                            {"c", encode_f64_base64(est.c.reshaped())}};
  write_file_atomic(file, j.dump());
  return est;
}

// ---------------------------------------------------------------------------

TokenId margin_competitor(const Vector& logits, TokenId old_object, int k, MarginRule rule) {
  if (old_object < 0 || old_object >= logits.size()) {
    throw std::out_of_range("erasure: old object " + std::to_string(old_object) + " outside vocabulary");
  }
  if (k < 1) throw std::invalid_argument("margin_competitor: k must be >= 1");
  if (logits.size() < k + 1) throw std::invalid_argument("erasure: vocabulary smaller than k + 1");
  std::vector<TokenId> order;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (rule == MarginRule::kLiteral || i != old_object) order.push_back(static_cast<TokenId>(i));
  }
  // Descending by logit, ties by lower id.
  std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), [&](TokenId a, TokenId b) {
    return logits(a) > logits(b) || (logits(a) == logits(b) && a < b);
  });
  return order[static_cast<std::size_t>(k - 1)];
}

double erasure_loss(const Vector& logits, TokenId old_object, int k, MarginRule rule) {
  if (old_object < 0 || old_object >= logits.size()) {
    throw std::out_of_range("erasure: old object " + std::to_string(old_object) + " outside vocabulary");
  }
  if (k == 0) return 0.0;
  const TokenId competitor = margin_competitor(logits, old_object, k, rule);
  return std::max(0.0, logits(old_object) - logits(competitor));
}

std::vector<Tokens> sample_prefixes(const Model& model, int n, std::span<const int> lengths, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_prefixes: need at least one prefix");
  if (lengths.empty()) throw std::invalid_argument("sample_prefixes: empty length list");
  boost::random::mt19937_64 rng(seed);
  std::vector<Tokens> out{Tokens{}};
  for (int j = 1; j < n; ++j) {
    const int len = lengths[static_cast<std::size_t>(j) % lengths.size()];
    if (len >= model.config.max_seq) throw std::invalid_argument("sample_prefixes: prefix length exceeds budget");
    Tokens seq;
    if (len > 0) seq.push_back(kBos);
    while (static_cast<int>(seq.size()) < len) {
      const Vector p = next_token_distribution(model, seq);
      boost::random::discrete_distribution<TokenId, double> draw(p.data(), p.data() + p.size());
      seq.push_back(draw(rng));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

namespace {

Tokens prefixed_prompt(const Model& model, const World& world, const EditRequest& edit, const Tokens& prefix) {
  Tokens seq = prefix;
  const Tokens p = render_prompt(world, edit.fact.subject, edit.fact.relation, 0);
  seq.insert(seq.end(), p.begin(), p.end());
  if (static_cast<int>(seq.size()) > model.config.max_seq) {
    throw std::invalid_argument("prefixed prompt of length " + std::to_string(seq.size()) + " exceeds max_seq");
  }
  return seq;
}

int prefixed_subject_position(const Tokens& prefix) { return static_cast<int>(prefix.size()) + subject_position(0); }

}  // namespace

Vector compute_subject_key(const Model& model, const World& world, int layer, const EditRequest& edit,
                           std::span<const Tokens> prefixes) {
  if (prefixes.empty()) throw std::invalid_argument("compute_subject_key: empty prefix list");
  Vector sum = Vector::Zero(model.config.d_ffn);
  for (const Tokens& prefix : prefixes) {
    sum += ffn_key(model, prefixed_prompt(model, world, edit, prefix), layer, prefixed_subject_position(prefix));
  }
  return sum / static_cast<double>(prefixes.size());
}

double injection_loss(const Model& model, const World& world, int layer, const EditRequest& edit, const Vector& h,
                      std::span<const Tokens> prefixes) {
  if (prefixes.empty()) throw std::invalid_argument("injection_loss: empty prefix list");
  const TokenId target = world.entity_token(edit.new_object);
  double total = 0.0;
  for (const Tokens& prefix : prefixes) {
    const Tokens seq = prefixed_prompt(model, world, edit, prefix);
    const Vector logits = next_token_logits(model, seq, Intervention{layer, prefixed_subject_position(prefix), h});
    total -= log_softmax(logits)(target);
  }
  return total / static_cast<double>(prefixes.size());
}

double anchor_kl_loss(const Model& model, const World& world, int layer, const EditRequest& edit, const Vector& h) {
  const Tokens anchor = render_anchor(world, edit.fact.subject);
  const Vector lp = log_softmax(next_token_logits(model, anchor, Intervention{layer, 1, h}));
  const Vector lq = log_softmax(next_token_logits(model, anchor));
  return std::max(0.0, (lp.array().exp() * (lp - lq).array()).sum());
}

// ---------------------------------------------------------------------------

EditObjective::EditObjective(const Model& model, const World& world, const EditRequest& edit,
                             const EditorConfig& config, std::vector<Tokens> prefixes)
    : model_(model), config_(config), prefixes_(std::move(prefixes)) {
  config_.validate();
  if (config_.layer >= model.config.n_layers) {
    throw std::out_of_range("editor layer " + std::to_string(config_.layer) + " outside model of " +
                            std::to_string(model.config.n_layers) + " layers");
  }
  if (prefixes_.empty()) throw std::invalid_argument("EditObjective: empty prefix list");
  if (edit.new_object == edit.fact.object) throw std::invalid_argument("edit: new object equals old object");
  old_token_ = world.entity_token(edit.fact.object);
  new_token_ = world.entity_token(edit.new_object);
  for (const Tokens& prefix : prefixes_) {
    const Tokens seq = prefixed_prompt(model, world, edit, prefix);
    validate_tokens(model, seq);
    batch_.add(seq);
    subject_columns_.push_back(batch_.segments.back().start + prefixed_subject_position(prefix));
  }
  const Tokens anchor = render_anchor(world, edit.fact.subject);
  batch_.add(anchor);
  subject_columns_.push_back(batch_.segments.back().start + 1);
  anchor_log_base_ = log_softmax(next_token_logits(model, anchor));
}

Vector EditObjective::base_value() const {
  const Tokens& first = batch_.tokens;
  const Segment& seg = batch_.segments.front();
  const std::span<const TokenId> seq(first.data() + seg.start, static_cast<std::size_t>(seg.length));
  const int pos = static_cast<int>(subject_columns_.front() - seg.start);
  ForwardResult r = forward(model_, seq, std::nullopt, RecordFlags{false, true, pos});
  return r.record->values[static_cast<std::size_t>(config_.layer)];
}

Var EditObjective::build(Tape& tape, Var h, LossTerms* terms) const {
  const ParamVars params = bind_constants(tape, model_);
  std::vector<TapeIntervention> ivs;
  for (Eigen::Index col : subject_columns_) ivs.push_back({config_.layer, col, h});
  const GraphOutputs g = build_forward(tape, model_, params, batch_, ivs, Readout::kLast);
  const Var logp = ad::log_softmax_cols(g.logits);
  const auto n = static_cast<Eigen::Index>(prefixes_.size());

  Var inject = ad::pick(logp, new_token_, 0);
  for (Eigen::Index j = 1; j < n; ++j) inject = ad::add(inject, ad::pick(logp, new_token_, j));
  inject = ad::scale(inject, -1.0 / static_cast<double>(n));

  const Var anchor_lp = ad::select_cols(logp, {n});
  const Var anchor =
      ad::sum(ad::mul(ad::exp(anchor_lp), ad::sub(anchor_lp, tape.constant(anchor_log_base_))));

  Var total = ad::add(inject, ad::scale(anchor, config_.anchor_weight));
  LossTerms t;
  t.inject = inject.scalar();
  t.anchor = anchor.scalar();
  if (config_.mode == EditMode::kKele && config_.margin_rank > 0) {
    const Vector d = g.logits.value().col(0);
    const TokenId competitor = margin_competitor(d, old_token_, config_.margin_rank, config_.margin_rule);
    const Var erase = ad::relu(ad::sub(ad::pick(g.logits, old_token_, 0), ad::pick(g.logits, competitor, 0)));
    t.erase = erase.scalar();
    total = ad::add(erase, total);
  }
  t.total = total.scalar();
  if (terms != nullptr) *terms = t;
  return total;
}

LossTerms EditObjective::evaluate(const Vector& h) const {
  Tape tape;
  LossTerms t;
  build(tape, tape.constant(h), &t);
  return t;
}

LossTerms EditObjective::value_and_grad(const Vector& h, Vector& grad) const {
  Tape tape;
  const Var leaf = tape.leaf(h);
  LossTerms t;
  const Var total = build(tape, leaf, &t);
  tape.backward(total);
  grad = tape.grad(leaf).col(0);
  return t;
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t edit_seed(std::uint64_t seed, const EditRequest& edit) {
  return seed * 1000003ULL + static_cast<std::uint64_t>(edit.fact.subject) * 131ULL +
         static_cast<std::uint64_t>(edit.fact.relation);
}

bool finite_terms(const LossTerms& t) {
  return std::isfinite(t.erase) && std::isfinite(t.inject) && std::isfinite(t.anchor) && std::isfinite(t.total);
}

std::string describe(const LossTerms& t) {
  std::ostringstream os;
  os << "L_e=" << t.erase << " L_p=" << t.inject << " L_a=" << t.anchor << " total=" << t.total;
  return os.str();
}

}  // namespace

EditSolution optimize_recall_vector(const Model& model, const World& world, const EditRequest& edit,
                                    const EditorConfig& config) {
  return optimize_recall_vector(model, world, edit, config,
                                sample_prefixes(model, config.n_prefixes, config.prefix_lengths,
                                                edit_seed(config.seed, edit)));
}

EditSolution optimize_recall_vector(const Model& model, const World& world, const EditRequest& edit,
                                    const EditorConfig& config, std::vector<Tokens> prefixes) {
  const EditObjective objective(model, world, edit, config, std::move(prefixes));
  Vector h = Vector::Zero(model.config.d_model);
  Vector grad;
  LossTerms current = objective.value_and_grad(h, grad);
  if (!finite_terms(current)) throw EditError("optimize_recall_vector: step 0: non-finite loss (" + describe(current) + ")");

  EditSolution sol;
  sol.mode = config.mode;
  sol.trace.push_back(current);
  constexpr int kMaxHalvings = 30;
  for (int step = 1; step <= config.steps; ++step) {
    const double norm = grad.norm();
    if (norm == 0.0) break;
    const Vector dir = norm > config.clip_norm ? Vector(grad * (config.clip_norm / norm)) : grad;
    double eta = config.step_size;
    bool accepted = false;
    for (int attempt = 0; attempt <= kMaxHalvings; ++attempt, eta *= 0.5) {
      const Vector trial = h - eta * dir;
      Vector trial_grad;
      const LossTerms t = objective.value_and_grad(trial, trial_grad);
      if (!finite_terms(t)) {
        throw EditError("optimize_recall_vector: step " + std::to_string(step) + ": non-finite loss (" + describe(t) +
                        ")");
      }
      if (t.total <= current.total) {
        h = trial;
        grad = std::move(trial_grad);
        current = t;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    sol.trace.push_back(current);
  }
  sol.offset = h;
  sol.value = objective.base_value() + h;
  return sol;
}

EditSolution apply_edit(Model& model, const World& world, const EditRequest& edit, const CovarianceEstimate& cov,
                        const EditorConfig& config) {
  config.validate();
  if (config.layer >= model.config.n_layers) throw std::out_of_range("apply_edit: layer out of range");
  std::vector<Tokens> prefixes =
      sample_prefixes(model, config.n_prefixes, config.prefix_lengths, edit_seed(config.seed, edit));
  const Vector key = compute_subject_key(model, world, config.layer, edit, prefixes);
  EditSolution sol = optimize_recall_vector(model, world, edit, config, std::move(prefixes));
  sol.key = key;

  Matrix& w = model.blocks[static_cast<std::size_t>(config.layer)].w_out;
  Matrix updated = rank_one_update(w, cov.c, key, sol.value);
  if (!updated.allFinite()) throw EditError("apply_edit: updated weights are not finite");
  sol.delta_norm = (updated - w).norm();
  w = std::move(updated);
  sol.post_edit_answer =
      argmax_token(next_token_logits(model, render_prompt(world, edit.fact.subject, edit.fact.relation, 0)));
  return sol;
}

// ---------------------------------------------------------------------------

nlohmann::json solution_to_json(const EditSolution& s) {
  nlohmann::json trace = {{"erase", nlohmann::json::array()},
                          {"inject", nlohmann::json::array()},
                          {"anchor", nlohmann::json::array()},
                          {"total", nlohmann::json::array()}};
  for (const LossTerms& t : s.trace) {
    trace["erase"].push_back(t.erase);
    trace["inject"].push_back(t.inject);
    trace["anchor"].push_back(t.anchor);
    trace["total"].push_back(t.total);
  }
  return {{"k_star", encode_f64_base64(s.key)},
          {"v_star", encode_f64_base64(s.value)},
          {"h", encode_f64_base64(s.offset)},
          {"trace", trace},
          {"delta_w_fro", s.delta_norm},
          {"mode", to_string(s.mode)},
          {"post_edit_answer", s.post_edit_answer}};
}

EditSolution solution_from_json(const nlohmann::json& j) {
  EditSolution s;
  s.key = decode_f64_base64(j.at("k_star").get<std::string>());
  s.value = decode_f64_base64(j.at("v_star").get<std::string>());
  s.offset = decode_f64_base64(j.at("h").get<std::string>());
  const auto& tr = j.at("trace");
  const std::size_t n = tr.at("total").size();
  for (std::size_t i = 0; i < n; ++i) {
    s.trace.push_back(LossTerms{tr.at("erase").at(i).get<double>(), tr.at("inject").at(i).get<double>(),
                                tr.at("anchor").at(i).get<double>(), tr.at("total").at(i).get<double>()});
  }
  s.delta_norm = j.at("delta_w_fro").get<double>();
  s.mode = edit_mode_from_string(j.at("mode").get<std::string>());
  s.post_edit_answer = j.at("post_edit_answer").get<TokenId>();
  return s;
}

}  // namespace kele
