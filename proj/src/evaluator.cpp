// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

namespace kele {

RetainStats standardized_logit(const Vector& logits, TokenId token) {
  if (token < 0 || token >= logits.size()) throw std::out_of_range("retain score: token outside vocabulary");
  const double mean = logits.mean();
  const double var = (logits.array() - mean).square().mean();
  if (!(var > 0.0)) throw EvalError("retain score: degenerate logits (zero standard deviation)");
  const double sd = std::sqrt(var);
  return RetainStats{(logits(token) - mean) / sd, mean, sd};
}

RetainStats retain_score(const Model& model, const World& world, const EditRequest& edit) {
  const Vector d = next_token_logits(model, render_prompt(world, edit.fact.subject, edit.fact.relation, 0));
  return standardized_logit(d, world.entity_token(edit.fact.object));
}

double retain_score_instance(const Model& model, const World& world, const MultiHopInstance& instance) {
  double total = 0.0;
  for (const EditRequest& e : instance.edits) total += retain_score(model, world, e).score;
  return total;
}

int token_rank(const Vector& logits, TokenId token) {
  if (token < 0 || token >= logits.size()) throw std::out_of_range("token_rank: token outside vocabulary");
  const double t = logits(token);
  int rank = 1;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (logits(i) > t || (logits(i) == t && i < token)) ++rank;
  }
  return rank;
}

namespace {

// P(a) > P(b) under one softmax is logit(a) > logit(b).
bool prefers(const Vector& logits, TokenId a, TokenId b) { return logits(a) > logits(b); }

double template_indicator(const Model& model, const World& world, std::span<const EditRequest> edits, int tmpl) {
  if (edits.empty()) throw EvalError("empty prompt set");
  double hits = 0.0;
  for (const EditRequest& e : edits) {
    const Vector d = next_token_logits(model, render_prompt(world, e.fact.subject, e.fact.relation, tmpl));
    hits += prefers(d, world.entity_token(e.new_object), world.entity_token(e.fact.object)) ? 1.0 : 0.0;
  }
  return hits / static_cast<double>(edits.size());
}

double neighbor_fraction(const Model& model, const World& world, const EditRequest& e, int n) {
  const std::vector<NeighborPrompt> prompts = neighborhood_prompts(world, e, n);
  if (prompts.empty()) throw EvalError("empty prompt set");
  double hits = 0.0;
  for (const NeighborPrompt& p : prompts) {
    const Vector d = next_token_logits(model, p.prompt);
    hits += prefers(d, world.entity_token(p.fact.object), world.entity_token(e.new_object)) ? 1.0 : 0.0;
  }
  return hits / static_cast<double>(prompts.size());
}

double question_accuracy(const Model& model, const World& world, const MultiHopInstance& inst, AnswerTarget target) {
  if (inst.questions.empty()) throw EvalError("instance has no questions");
  const TokenId want =
      world.entity_token(target == AnswerTarget::kCorrect ? inst.new_answer : inst.original_answer);
  double hits = 0.0;
  for (const Tokens& q : inst.questions) hits += argmax_token(next_token_logits(model, q)) == want ? 1.0 : 0.0;
  return hits / static_cast<double>(inst.questions.size());
}

}  // namespace

double efficacy_score(const Model& model, const World& world, std::span<const EditRequest> edits) {
  return template_indicator(model, world, edits, 0);
}

double paraphrase_score(const Model& model, const World& world, std::span<const EditRequest> edits) {
  return template_indicator(model, world, edits, 1);
}

double neighborhood_score(const Model& model, const World& world, std::span<const EditRequest> edits, int per_edit) {
  if (edits.empty() || per_edit < 1) throw EvalError("empty prompt set");
  double total = 0.0;
  for (const EditRequest& e : edits) total += neighbor_fraction(model, world, e, per_edit);
  return total / static_cast<double>(edits.size());
}

double multihop_accuracy(const Model& model, const World& world, std::span<const MultiHopInstance> instances,
                         AnswerTarget target) {
  if (instances.empty()) throw EvalError("multihop_accuracy: no instances");
  double total = 0.0;
  for (const MultiHopInstance& inst : instances) total += question_accuracy(model, world, inst, target);
  return total / static_cast<double>(instances.size());
}

// ---------------------------------------------------------------------------

BinTable bin_scores(std::span<const double> scores, std::span<const double> correct, std::span<const double> original,
                    std::span<const double> edges) {
  if (correct.size() != scores.size() || original.size() != scores.size()) {
    throw std::invalid_argument("bin_scores: series lengths differ");
  }
  if (edges.size() < 2) throw std::invalid_argument("bin_scores: need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("bin_scores: edges must be strictly increasing");
  }
  BinTable t;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) t.rows.push_back(BinRow{edges[i], edges[i + 1]});
  t.overflow.lo = -std::numeric_limits<double>::infinity();
  t.overflow.hi = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto it = std::upper_bound(edges.begin(), edges.end(), scores[i]);
    BinRow& row = (it == edges.begin() || it == edges.end())
                      ? t.overflow
                      : t.rows[static_cast<std::size_t>(it - edges.begin() - 1)];
    ++row.count;
    row.acc_correct += correct[i];
    row.acc_original += original[i];
  }
  auto finish = [](BinRow& r) {
    if (r.count > 0) {
      r.acc_correct /= static_cast<double>(r.count);
      r.acc_original /= static_cast<double>(r.count);
    }
  };
  for (BinRow& r : t.rows) finish(r);
  finish(t.overflow);
  return t;
}

std::vector<double> quantile_edges(std::span<const double> scores, int n_bins) {
  if (scores.empty()) throw std::invalid_argument("quantile_edges: no scores");
  if (n_bins < 1) throw std::invalid_argument("quantile_edges: n_bins must be positive");
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  const auto n = sorted.size();
  for (int b = 0; b < n_bins; ++b) {
    const double e = sorted[static_cast<std::size_t>(b) * n / static_cast<std::size_t>(n_bins)];
    if (edges.empty() || e > edges.back()) edges.push_back(e);
  }
  const double top = std::nextafter(sorted.back(), std::numeric_limits<double>::infinity());
  if (top > edges.back()) edges.push_back(top);
  return edges;
}

Histogram retain_distribution(std::span<const double> scores, double width) {
  if (!(width > 0.0)) throw std::invalid_argument("retain_distribution: width must be positive");
  Histogram h;
  h.width = width;
  if (scores.empty()) return h;
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double first = std::floor(*lo / width);
  h.origin = first * width;
  h.counts.assign(static_cast<std::size_t>(std::floor(*hi / width) - first) + 1, 0);
  for (double s : scores) ++h.counts[static_cast<std::size_t>(std::floor(s / width) - first)];
  return h;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: series lengths differ");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const Eigen::Map<const Vector> a(rx.data(), static_cast<Eigen::Index>(rx.size()));
  const Eigen::Map<const Vector> b(ry.data(), static_cast<Eigen::Index>(ry.size()));
  const Vector ca = a.array() - a.mean();
  const Vector cb = b.array() - b.mean();
  const double den = ca.norm() * cb.norm();
  if (den == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return ca.dot(cb) / den;
}

// ---------------------------------------------------------------------------

InstanceEval evaluate_instance(const Model& edited, const Model* base, const World& world,
                               const MultiHopInstance& instance, int instance_id, int neighbors_per_edit) {
  InstanceEval out;
  out.instance.instance_id = instance_id;
  for (const EditRequest& e : instance.edits) {
    EditRecord rec;
    rec.instance_id = instance_id;
    const TokenId o = world.entity_token(e.fact.object);
    const TokenId o_new = world.entity_token(e.new_object);
    const Vector d = next_token_logits(edited, render_prompt(world, e.fact.subject, e.fact.relation, 0));
    rec.rs = standardized_logit(d, o).score;
    rec.post_edit_rank_o = token_rank(d, o);
    rec.efficacy = prefers(d, o_new, o);
    const Vector d1 = next_token_logits(edited, render_prompt(world, e.fact.subject, e.fact.relation, 1));
    rec.paraphrase = prefers(d1, o_new, o);
    rec.neighborhood = neighbors_per_edit > 0 ? neighbor_fraction(edited, world, e, neighbors_per_edit) : 1.0;
    if (base != nullptr) {
      rec.pre_edit_rank_o =
          token_rank(next_token_logits(*base, render_prompt(world, e.fact.subject, e.fact.relation, 0)), o);
    }
    out.instance.rs += rec.rs;
    out.edits.push_back(rec);
  }
  out.instance.acc_correct = question_accuracy(edited, world, instance, AnswerTarget::kCorrect);
  out.instance.acc_original = question_accuracy(edited, world, instance, AnswerTarget::kOriginal);
  return out;
}

EvalReport assemble_report(std::vector<InstanceEval> results, std::optional<std::vector<double>> edges) {
  if (results.empty()) throw EvalError("evaluation: no instances");
  EvalReport r;
  int next_edit = 0;
  double neighborhood = 0.0;
  std::vector<double> rs, correct, original;
  for (InstanceEval& res : results) {
    for (EditRecord& e : res.edits) {
      e.edit_id = next_edit++;
      r.efficacy += e.efficacy ? 1.0 : 0.0;
      r.paraphrase += e.paraphrase ? 1.0 : 0.0;
      neighborhood += e.neighborhood;
      r.mean_rs += e.rs;
      r.edits.push_back(e);
    }
    r.multihop_correct += res.instance.acc_correct;
    r.multihop_original += res.instance.acc_original;
    rs.push_back(res.instance.rs);
    correct.push_back(res.instance.acc_correct);
    original.push_back(res.instance.acc_original);
    r.instances.push_back(res.instance);
  }
  const auto n_edits = static_cast<double>(std::max<std::size_t>(r.edits.size(), 1));
  const auto n_inst = static_cast<double>(r.instances.size());
  r.efficacy /= n_edits;
  r.paraphrase /= n_edits;
  r.neighborhood = neighborhood / n_edits;
  r.mean_rs /= n_edits;
  r.multihop_correct /= n_inst;
  r.multihop_original /= n_inst;
  r.bin_edges = edges ? *edges : quantile_edges(rs);
  if (r.bin_edges.size() < 2) {
    // All RS(d) equal: one bin around the common value.
    r.bin_edges = {rs.front(), std::nextafter(rs.front(), std::numeric_limits<double>::infinity())};
  }
  r.bins = bin_scores(rs, correct, original, r.bin_edges);
  return r;
}

EvalReport evaluate(const Model& edited, const Model* base, const World& world,
                    std::span<const MultiHopInstance> instances, int neighbors_per_edit, int threads) {
  std::vector<InstanceEval> results(instances.size());
  const auto n = static_cast<int>(instances.size());
  const int workers = std::clamp(threads, 1, std::max(n, 1));
  auto run = [&](int w) {
    for (int i = w; i < n; i += workers) {
      results[static_cast<std::size_t>(i)] =
          evaluate_instance(edited, base, world, instances[static_cast<std::size_t>(i)], i, neighbors_per_edit);
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run(w);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  return assemble_report(std::move(results));
}

// ---------------------------------------------------------------------------

namespace {

std::string num(double x) { return nlohmann::json(x).dump(); }

nlohmann::json bin_json(const BinRow& b) {
  auto edge = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(v < 0 ? "-inf" : "inf"); };
  return {{"bin_lo", edge(b.lo)},
          {"bin_hi", edge(b.hi)},
          {"count", b.count},
          {"acc_correct", b.acc_correct},
          {"acc_original", b.acc_original}};
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (const BinRow& b : r.bins.rows) bins.push_back(bin_json(b));
  nlohmann::json edits = nlohmann::json::array();
  for (const EditRecord& e : r.edits) {
    edits.push_back({{"edit_id", e.edit_id},
                     {"instance_id", e.instance_id},
                     {"rs", e.rs},
                     {"pre_edit_rank_o", e.pre_edit_rank_o},
                     {"post_edit_rank_o", e.post_edit_rank_o},
                     {"efficacy", e.efficacy},
                     {"paraphrase", e.paraphrase},
                     {"neighborhood", e.neighborhood}});
  }
  nlohmann::json instances = nlohmann::json::array();
  for (const InstanceRecord& i : r.instances) {
    instances.push_back({{"instance_id", i.instance_id},
                         {"rs", i.rs},
                         {"acc_correct", i.acc_correct},
                         {"acc_original", i.acc_original}});
  }
  return {{"efficacy", r.efficacy},
          {"paraphrase", r.paraphrase},
          {"neighborhood", r.neighborhood},
          {"multihop_correct", r.multihop_correct},
          {"multihop_original", r.multihop_original},
          {"mean_rs", r.mean_rs},
          {"bin_edges", r.bin_edges},
          {"bins", bins},
          {"overflow", bin_json(r.bins.overflow)},
          {"edits", edits},
          {"instances", instances}};
}

nlohmann::json histogram_to_json(const Histogram& h) {
  return {{"origin", h.origin}, {"width", h.width}, {"counts", h.counts}};
}

std::string bins_csv(const BinTable& t) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count,acc_correct,acc_original\n";
  auto row = [&](const BinRow& b) {
    os << num(b.lo) << ',' << num(b.hi) << ',' << b.count << ',' << num(b.acc_correct) << ',' << num(b.acc_original)
       << '\n';
  };
  for (const BinRow& b : t.rows) row(b);
  if (t.overflow.count > 0) {
    os << "-inf,inf," << t.overflow.count << ',' << num(t.overflow.acc_correct) << ','
       << num(t.overflow.acc_original) << '\n';
  }
  return os.str();
}

std::string edits_csv(std::span<const EditRecord> edits) {
  std::ostringstream os;
  os << "edit_id,rs,pre_edit_rank_o,post_edit_rank_o\n";
  for (const EditRecord& e : edits) {
    os << e.edit_id << ',' << num(e.rs) << ',';
    if (e.pre_edit_rank_o > 0) os << e.pre_edit_rank_o;
    os << ',' << e.post_edit_rank_o << '\n';
  }
  return os.str();
}

int evaluation_threads() {
  if (const char* env = std::getenv("KELE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
    throw std::invalid_argument(std::string("KELE_THREADS must be a positive integer, got \"") + env + "\"");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace kele
