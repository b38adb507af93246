// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rank-one knowledge editing with residual-knowledge erasure.
//
// An edit (s, r, o, o*) is applied to one FFN output matrix W (layer l):
//   1. k* = mean over random prefixes of the layer-l FFN key at the last
//      subject token.
//   2. v* = v + h, where v is the current FFN value at the subject token and
//      h minimizes  L_erase + L_inject + lambda * L_anchor  with the model
//      frozen.
//   3. W <- W + (v* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*), C the uncentered
//      key covariance, so that W k* = v* exactly while keys orthogonal to
//      C^-1 k* keep their values.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <nlohmann/json.hpp>

#include "kele/model.hpp"
#include "kele/world.hpp"

namespace kele {

enum class EditMode { kKele, kRomeBaseline };

/// How the k-th competitor logit of the erasure margin is chosen.
enum class MarginRule {
  kExcludeTarget,  // k-th largest logit among tokens other than o
  kLiteral,        // k-th largest entry of the full logit vector
};

std::string to_string(EditMode mode);
EditMode edit_mode_from_string(const std::string& s);

struct EditorConfig {
  int layer = 1;
  int margin_rank = 1;  // k; 0 disables erasure
  double anchor_weight = 0.0625;
  int n_prefixes = 5;
  std::vector<int> prefix_lengths = {0, 2, 2, 5, 5};
  int steps = 50;
  double step_size = 0.5;
  double clip_norm = 1.0;
  /// Ridge added to the covariance is ridge_scale * trace(C) / d_ffn.
  double ridge_scale = 1e-4;
  EditMode mode = EditMode::kKele;
  MarginRule margin_rule = MarginRule::kExcludeTarget;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const EditorConfig& c);

class EditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Covariance

struct CovarianceEstimate {
  Matrix c;  // d_ffn x d_ffn, ridge included
  long n_samples = 0;
  long n_keys = 0;
  double ridge = 0.0;
};

/// (1/n) sum_i k_i k_i^T + ridge I over the columns of keys.
CovarianceEstimate covariance_from_keys(const Matrix& keys, double ridge);

/// Covariance of layer keys over every token of n_samples prompts drawn from
/// the world's single-hop, paraphrase, two-hop and anchor prompts. A ridge of
/// nullopt uses ridge_scale * trace / d_ffn.
CovarianceEstimate estimate_covariance(const Model& model, int layer, const World& world, int n_samples,
                                       std::optional<double> ridge, std::uint64_t seed, double ridge_scale = 1e-4);

/// estimate_covariance with an on-disk cache under cache_dir, keyed by model
/// checksum, layer, sample count, seed and ridge settings.
CovarianceEstimate cached_covariance(const std::filesystem::path& cache_dir, const Model& model, int layer,
                                     const World& world, int n_samples, std::uint64_t seed, double ridge_scale);

// ---------------------------------------------------------------------------
// Closed-form update

/// W + (v* - W k*) (C^-1 k*)^T / ((C^-1 k*)^T k*), with C^-1 k* from a
/// Cholesky solve. Throws EditError when C is not positive definite.
template <typename DW, typename DC, typename DK, typename DV>
Eigen::Matrix<typename DW::Scalar, Eigen::Dynamic, Eigen::Dynamic> rank_one_update(
    const Eigen::MatrixBase<DW>& w, const Eigen::MatrixBase<DC>& c, const Eigen::MatrixBase<DK>& key,
    const Eigen::MatrixBase<DV>& value) {
  using Scalar = typename DW::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (c.rows() != c.cols() || c.rows() != w.cols() || key.size() != w.cols() || value.size() != w.rows()) {
    throw ShapeError("rank_one_update: W " + shape_of(w) + ", C " + shape_of(c) + ", k* " + shape_of(key) + ", v* " +
                     shape_of(value));
  }
  const Eigen::LLT<Mat> llt(c);
  if (llt.info() != Eigen::Success) throw EditError("rank_one_update: covariance is not positive definite");
  const Vec k = key.reshaped();
  const Vec y = llt.solve(k);
  const Scalar denom = y.dot(k);
  if (!(denom > Scalar(0))) throw EditError("rank_one_update: non-positive denominator (C^-1 k*)^T k*");
  const Vec residual = value.reshaped() - w * k;
  return w + residual * y.transpose() / denom;
}

// ---------------------------------------------------------------------------
// Recall-vector objective

/// max(0, D_o - D_k); zero when k == 0.
double erasure_loss(const Vector& logits, TokenId old_object, int k, MarginRule rule = MarginRule::kExcludeTarget);

/// Index of the k-th competitor used by erasure_loss (k >= 1).
TokenId margin_competitor(const Vector& logits, TokenId old_object, int k, MarginRule rule);

/// Random prefixes: the empty prefix first, then prefixes of the configured
/// lengths sampled from the model at temperature 1 starting from BOS.
std::vector<Tokens> sample_prefixes(const Model& model, int n, std::span<const int> lengths, std::uint64_t seed);

/// Mean layer key at the subject token over prefix + render_prompt(s, r).
Vector compute_subject_key(const Model& model, const World& world, int layer, const EditRequest& edit,
                           std::span<const Tokens> prefixes);

/// Mean over prefixes of -log P(o* | prefix + p(s, r)) with h added at the subject token.
double injection_loss(const Model& model, const World& world, int layer, const EditRequest& edit, const Vector& h,
                      std::span<const Tokens> prefixes);

/// KL(P_h(. | ANC s) || P(. | ANC s)).
double anchor_kl_loss(const Model& model, const World& world, int layer, const EditRequest& edit, const Vector& h);

struct LossTerms {
  double erase = 0.0;
  double inject = 0.0;
  double anchor = 0.0;
  double total = 0.0;
};

/// Frozen-model objective in h for one edit. Holds the prompts and the
/// reference anchor distribution.
class EditObjective {
 public:
  EditObjective(const Model& model, const World& world, const EditRequest& edit, const EditorConfig& config,
                std::vector<Tokens> prefixes);

  /// Records the objective on a tape with h as the offset; returns the total.
  Var build(Tape& tape, Var h, LossTerms* terms = nullptr) const;
  LossTerms evaluate(const Vector& h) const;
  /// Total and gradient in one pass.
  LossTerms value_and_grad(const Vector& h, Vector& grad) const;

  const std::vector<Tokens>& prefixes() const { return prefixes_; }
  /// FFN value at the subject token of the unprefixed prompt.
  Vector base_value() const;

 private:
  const Model& model_;
  EditorConfig config_;
  TokenId old_token_;
  TokenId new_token_;
  std::vector<Tokens> prefixes_;
  Batch batch_;
  std::vector<Eigen::Index> subject_columns_;
  Matrix anchor_log_base_;  // vocab x 1
};

struct EditSolution {
  Vector key;     // k*
  Vector value;   // v* = base value + h
  Vector offset;  // h
  std::vector<LossTerms> trace;  // one entry per accepted iterate, starting at h = 0
  double delta_norm = 0.0;       // ||W_new - W_old||_F
  EditMode mode = EditMode::kKele;
  TokenId post_edit_answer = -1;
};

nlohmann::json solution_to_json(const EditSolution& s);
EditSolution solution_from_json(const nlohmann::json& j);

/// Gradient descent on h from zero with norm clipping. A step that raises the
/// total is retried at half the step size, so the trace is non-increasing.
EditSolution optimize_recall_vector(const Model& model, const World& world, const EditRequest& edit,
                                    const EditorConfig& config);
EditSolution optimize_recall_vector(const Model& model, const World& world, const EditRequest& edit,
                                    const EditorConfig& config, std::vector<Tokens> prefixes);

/// k*, v*, rank-one update of blocks[layer].w_out. Mutates only that matrix.
EditSolution apply_edit(Model& model, const World& world, const EditRequest& edit, const CovarianceEstimate& cov,
                        const EditorConfig& config);

}  // namespace kele
