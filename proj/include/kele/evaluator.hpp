// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Retention and editing metrics.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kele/model.hpp"
#include "kele/world.hpp"

namespace kele {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RetainStats {
  double score = 0.0;
  double mean = 0.0;
  double stddev = 0.0;  // population
};

/// (D_o - mean(D)) / std(D). Throws EvalError when every logit is equal.
RetainStats standardized_logit(const Vector& logits, TokenId token);

/// Standardized logit of o after render_prompt(s, r, 0) with no prefix.
RetainStats retain_score(const Model& model, const World& world, const EditRequest& edit);
/// Sum over the instance's edits.
double retain_score_instance(const Model& model, const World& world, const MultiHopInstance& instance);

/// 1 + number of tokens ranked above `token` (ties broken by lower id).
int token_rank(const Vector& logits, TokenId token);

/// Mean of 1[P(o*) > P(o)] on template-0 prompts.
double efficacy_score(const Model& model, const World& world, std::span<const EditRequest> edits);
/// Same indicator on template-1 prompts.
double paraphrase_score(const Model& model, const World& world, std::span<const EditRequest> edits);
/// Mean of 1[P(o*) < P(o')] over neighbours (s', r, o') of every edit.
double neighborhood_score(const Model& model, const World& world, std::span<const EditRequest> edits,
                          int per_edit);

enum class AnswerTarget { kCorrect, kOriginal };

/// Per instance, fraction of its questions whose greedy answer is the target;
/// averaged over instances.
double multihop_accuracy(const Model& model, const World& world, std::span<const MultiHopInstance> instances,
                         AnswerTarget target);

// ---------------------------------------------------------------------------
// Binning and summary statistics

struct BinRow {
  double lo = 0.0;
  double hi = 0.0;
  long count = 0;
  double acc_correct = 0.0;
  double acc_original = 0.0;
};

struct BinTable {
  std::vector<BinRow> rows;
  BinRow overflow;  // scores outside [edges.front(), edges.back())
};

/// Assigns score i to the half-open bin [e_j, e_{j+1}) and averages the two
/// indicator series per bin. Empty bins report accuracy 0.
BinTable bin_scores(std::span<const double> scores, std::span<const double> correct,
                    std::span<const double> original, std::span<const double> edges);

/// Quintile edges of the scores; the last edge sits just above the maximum so
/// every score lands in a bin. Duplicate edges are dropped.
std::vector<double> quantile_edges(std::span<const double> scores, int n_bins = 5);

struct Histogram {
  double origin = 0.0;  // left edge of the first bin
  double width = 1.0;
  std::vector<long> counts;
};

/// Fixed-width histogram with bins aligned to multiples of width.
Histogram retain_distribution(std::span<const double> scores, double width);

/// Rank correlation with average ranks for ties. NaN when either series is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Reports

struct EditRecord {
  int edit_id = 0;
  int instance_id = 0;
  double rs = 0.0;
  int pre_edit_rank_o = 0;  // 0 when no base model was supplied
  int post_edit_rank_o = 0;
  bool efficacy = false;
  bool paraphrase = false;
  double neighborhood = 0.0;  // fraction over this edit's neighbours
};

struct InstanceRecord {
  int instance_id = 0;
  double rs = 0.0;  // RS(d)
  double acc_correct = 0.0;
  double acc_original = 0.0;
};

/// Metrics of one instance on an (edited) model; base supplies pre-edit ranks.
struct InstanceEval {
  InstanceRecord instance;
  std::vector<EditRecord> edits;
};

InstanceEval evaluate_instance(const Model& edited, const Model* base, const World& world,
                               const MultiHopInstance& instance, int instance_id, int neighbors_per_edit);

struct EvalReport {
  double efficacy = 0.0;
  double paraphrase = 0.0;
  double neighborhood = 0.0;
  double multihop_correct = 0.0;
  double multihop_original = 0.0;
  double mean_rs = 0.0;
  std::vector<double> bin_edges;
  BinTable bins;
  std::vector<EditRecord> edits;  // edit_id ascending
  std::vector<InstanceRecord> instances;
};

/// Aggregates instance results; edges default to quintiles of RS(d).
EvalReport assemble_report(std::vector<InstanceEval> results, std::optional<std::vector<double>> edges = {});

/// Evaluates every instance against one model, fanned out over `threads`
/// workers with results gathered in dataset order.
EvalReport evaluate(const Model& edited, const Model* base, const World& world,
                    std::span<const MultiHopInstance> instances, int neighbors_per_edit, int threads = 1);

nlohmann::json report_to_json(const EvalReport& r);
nlohmann::json histogram_to_json(const Histogram& h);
std::string bins_csv(const BinTable& t);
std::string edits_csv(std::span<const EditRecord> edits);

/// Worker count from KELE_THREADS, else the hardware count (at least 1).
int evaluation_threads();

}  // namespace kele
