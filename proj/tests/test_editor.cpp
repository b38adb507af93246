// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "fixtures.hpp"
#include "kele/editor.hpp"

using namespace kele;
using kele::testing::random_matrix;

namespace {

Matrix random_spd(Eigen::Index d, std::uint64_t seed) {
  const Matrix a = random_matrix(d, 2 * d, seed);
  return a * a.transpose() / static_cast<double>(2 * d) + 0.1 * Matrix::Identity(d, d);
}

// Row-wise constrained least squares through the full KKT system:
//   min (w - w0)^T C (w - w0)  s.t.  w^T k = v_i.
Matrix kkt_solve(const Matrix& w0, const Matrix& c, const Vector& k, const Vector& v) {
  const Eigen::Index d = c.rows();
  Matrix a = Matrix::Zero(d + 1, d + 1);
  a.topLeftCorner(d, d) = 2.0 * c;
  a.block(0, d, d, 1) = k;
  a.block(d, 0, 1, d) = k.transpose();
  const Eigen::FullPivLU<Matrix> lu(a);
  Matrix out(w0.rows(), w0.cols());
  for (Eigen::Index i = 0; i < w0.rows(); ++i) {
    Vector rhs(d + 1);
    rhs.head(d) = 2.0 * c * w0.row(i).transpose();
    rhs(d) = v(i);
    out.row(i) = lu.solve(rhs).head(d).transpose();
  }
  return out;
}

EditRequest some_edit(const World& w, std::size_t i) {
  const Fact f = w.facts()[i];
  return EditRequest{f, (f.object + 5) % w.n_entities()};
}

EditorConfig small_editor() {
  EditorConfig c;
  c.layer = 1;
  c.steps = 25;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("rank-one update hand example") {
  const Matrix w = Matrix::Identity(2, 2);
  const Matrix c = Matrix::Identity(2, 2);
  Vector k(2), v(2);
  k << 1, 0;
  v << 0, 2;
  Matrix expect(2, 2);
  expect << 0, 0, 2, 1;
  CHECK((rank_one_update(w, c, k, v) - expect).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("rank-one update properties") {
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index d_in = 6 + trial % 5, d_out = 4 + trial % 3;
    const auto seed = static_cast<std::uint64_t>(1000 + trial);
    const Matrix w = random_matrix(d_out, d_in, seed);
    const Matrix c = random_spd(d_in, seed + 1);
    const Vector k = random_matrix(d_in, 1, seed + 2);
    const Vector v = random_matrix(d_out, 1, seed + 3);
    const Matrix u = rank_one_update(w, c, k, v);
    CHECK((u * k - v).norm() / v.norm() <= 1e-10);

    const Eigen::JacobiSVD<Matrix> svd(u - w);
    const Vector s = svd.singularValues();
    CHECK(s(1) <= 1e-10 * s(0));

    // Keys C-orthogonal to k keep their values.
    const Vector y = c.llt().solve(k);
    Vector other = random_matrix(d_in, 1, seed + 4);
    other -= y.dot(other) / y.dot(y) * y;
    CHECK((u * other - w * other).norm() <= 1e-10 * (1.0 + (w * other).norm()));
  }
}

TEST_CASE("rank-one update matches the KKT solve") {
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index d = 2 + trial % 7;
    const auto seed = static_cast<std::uint64_t>(5000 + trial);
    const Matrix w = random_matrix(3, d, seed);
    const Matrix c = random_spd(d, seed + 1);
    const Vector k = random_matrix(d, 1, seed + 2);
    const Vector v = random_matrix(3, 1, seed + 3);
    CHECK((rank_one_update(w, c, k, v) - kkt_solve(w, c, k, v)).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("rank-one update is invariant to covariance scale") {
  for (int trial = 0; trial < 20; ++trial) {
    const auto seed = static_cast<std::uint64_t>(9000 + trial);
    const Matrix w = random_matrix(5, 8, seed);
    const Matrix c = random_spd(8, seed + 1);
    const Vector k = random_matrix(8, 1, seed + 2);
    const Vector v = random_matrix(5, 1, seed + 3);
    const Matrix base = rank_one_update(w, c, k, v);
    for (double scale : {0.1, 10.0}) {
      CHECK((rank_one_update(w, Matrix(scale * c), k, v) - base).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
}

TEST_CASE("rank-one update errors") {
  const Matrix w = Matrix::Identity(2, 2);
  Vector k(2), v(2);
  k << 1, 0;
  v << 0, 2;
  CHECK_THROWS_AS(rank_one_update(w, Matrix::Identity(3, 3), k, v), ShapeError);
  Matrix indefinite(2, 2);
  indefinite << 1, 0, 0, -1;
  CHECK_THROWS_AS(rank_one_update(w, indefinite, k, v), EditError);
  CHECK_THROWS_AS(rank_one_update(w, Matrix::Identity(2, 2), Vector::Zero(2), v), EditError);
}

TEST_CASE("erasure margin") {
  Vector d(3);
  d << 5, 3, 1;
  CHECK(std::fabs(erasure_loss(d, 0, 1) - 2.0) <= 1e-9);
  CHECK(erasure_loss(d, 0, 0) == 0.0);
  CHECK(erasure_loss(d, 0, 2) == doctest::Approx(4.0));
  CHECK(erasure_loss(d, 2, 1) == 0.0);
  CHECK(erasure_loss(d, 0, 1, MarginRule::kLiteral) == 0.0);
  CHECK(erasure_loss(d, 0, 2, MarginRule::kLiteral) == doctest::Approx(2.0));
  CHECK_THROWS_AS(erasure_loss(d, 3, 1), std::out_of_range);
  CHECK_THROWS_AS(erasure_loss(d, 0, 3), std::invalid_argument);

  Vector tie(4);
  tie << 2, 7, 7, 1;
  CHECK(margin_competitor(tie, 0, 1, MarginRule::kExcludeTarget) == 1);
  CHECK(margin_competitor(tie, 0, 2, MarginRule::kExcludeTarget) == 2);
  CHECK(margin_competitor(tie, 1, 1, MarginRule::kExcludeTarget) == 2);
}

TEST_CASE("editor config") {
  EditorConfig c;
  CHECK_NOTHROW(c.validate());
  c.margin_rank = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = EditorConfig{};
  c.anchor_weight = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = EditorConfig{};
  c.n_prefixes = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(edit_mode_from_string(to_string(EditMode::kKele)) == EditMode::kKele);
  CHECK(edit_mode_from_string("rome") == EditMode::kRomeBaseline);
  CHECK_THROWS_AS(edit_mode_from_string("memit"), std::invalid_argument);
}

TEST_CASE("covariance") {
  const Matrix keys = random_matrix(6, 40, 77);
  const CovarianceEstimate est = covariance_from_keys(keys, 0.01);
  Matrix naive = Matrix::Zero(6, 6);
  for (Eigen::Index t = 0; t < keys.cols(); ++t)
    for (Eigen::Index i = 0; i < 6; ++i)
      for (Eigen::Index j = 0; j < 6; ++j) naive(i, j) += keys(i, t) * keys(j, t);
  naive /= 40.0;
  naive.diagonal().array() += 0.01;
  CHECK((est.c - naive).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK(est.c == est.c.transpose());

  const World& w = kele::testing::small_world();
  const Model& m = kele::testing::small_trained_model();
  const CovarianceEstimate a = estimate_covariance(m, 1, w, 64, std::nullopt, 5);
  CHECK(a.c.rows() == 64);
  CHECK((a.c - a.c.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK(a.c.llt().info() == Eigen::Success);
  CHECK(a.ridge > 0.0);
  CHECK(a.n_samples == 64);
  CHECK(estimate_covariance(m, 1, w, 64, std::nullopt, 5).c == a.c);
  CHECK(estimate_covariance(m, 1, w, 64, std::nullopt, 6).c != a.c);

  const auto dir = kele::testing::temp_dir("cov");
  const CovarianceEstimate first = cached_covariance(dir, m, 1, w, 64, 5, 1e-4);
  CHECK(first.c == a.c);
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files += e.is_regular_file();
  CHECK(files == 1);
  CHECK(cached_covariance(dir, m, 1, w, 64, 5, 1e-4).c == a.c);
  cached_covariance(dir, m, 2, w, 64, 5, 1e-4);
  files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) files += e.is_regular_file();
  CHECK(files == 2);
}

TEST_CASE("subject key and prefixes") {
  const World& w = kele::testing::small_world();
  const Model& m = kele::testing::small_trained_model();
  const std::vector<int> lengths = {0, 2, 3};
  const auto prefixes = sample_prefixes(m, 4, lengths, 9);
  REQUIRE(prefixes.size() == 4);
  CHECK(prefixes[0].empty());
  for (std::size_t j = 1; j < prefixes.size(); ++j) {
    CHECK(prefixes[j].size() == static_cast<std::size_t>(lengths[j % lengths.size()]));
    if (!prefixes[j].empty()) CHECK(prefixes[j][0] == kBos);
  }
  CHECK(sample_prefixes(m, 4, lengths, 9) == prefixes);

  const EditRequest e = some_edit(w, 0);
  Vector expect = Vector::Zero(64);
  for (const Tokens& p : prefixes) {
    Tokens full = p;
    const Tokens q = render_prompt(w, e.fact.subject, e.fact.relation, 0);
    full.insert(full.end(), q.begin(), q.end());
    expect += ffn_key(m, full, 1, static_cast<int>(p.size()) + subject_position(0));
  }
  expect /= 4.0;
  CHECK((compute_subject_key(m, w, 1, e, prefixes) - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("objective agrees with the reference losses") {
  const World& w = kele::testing::small_world();
  const Model& m = kele::testing::small_trained_model();
  const EditorConfig cfg = small_editor();
  const EditRequest e = some_edit(w, 2);
  const auto prefixes = sample_prefixes(m, cfg.n_prefixes, cfg.prefix_lengths, 4);
  const EditObjective obj(m, w, e, cfg, prefixes);
  const Vector h = random_matrix(32, 1, 8, -0.5, 0.5);
  const LossTerms t = obj.evaluate(h);
  CHECK(t.inject == doctest::Approx(injection_loss(m, w, 1, e, h, prefixes)).epsilon(1e-10));
  CHECK(t.anchor == doctest::Approx(anchor_kl_loss(m, w, 1, e, h)).epsilon(1e-10));
  CHECK(anchor_kl_loss(m, w, 1, e, Vector::Zero(32)) == doctest::Approx(0.0));
  const Tokens q = render_prompt(w, e.fact.subject, e.fact.relation, 0);
  const Vector logits = next_token_logits(m, q, Intervention{1, subject_position(0), h});
  CHECK(t.erase == doctest::Approx(erasure_loss(logits, w.entity_token(e.fact.object), cfg.margin_rank)));
  CHECK(t.total == doctest::Approx(t.erase + t.inject + cfg.anchor_weight * t.anchor));
}

TEST_CASE("objective gradient matches central differences") {
  const World& w = kele::testing::small_world();
  const Model& m = kele::testing::small_trained_model();
  EditorConfig cfg = small_editor();
  cfg.margin_rank = 2;
  cfg.anchor_weight = 0.5;
  for (int state = 0; state < 10; ++state) {
    const EditRequest e = some_edit(w, static_cast<std::size_t>(3 * state));
    const auto prefixes = sample_prefixes(m, cfg.n_prefixes, cfg.prefix_lengths, static_cast<std::uint64_t>(state));
    const EditObjective obj(m, w, e, cfg, prefixes);
    const Vector h = random_matrix(32, 1, static_cast<std::uint64_t>(40 + state), -1.0, 1.0);
    Vector grad;
    obj.value_and_grad(h, grad);
    double worst = 0.0;
    const double step = 1e-5;
    for (Eigen::Index i = 0; i < h.size(); ++i) {
      Vector hp = h, hm = h;
      hp(i) += step;
      hm(i) -= step;
      const double numeric = (obj.evaluate(hp).total - obj.evaluate(hm).total) / (2.0 * step);
      worst = std::max(worst, std::fabs(grad(i) - numeric) / std::max(1.0, std::fabs(grad(i))));
    }
    INFO("state " << state);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("recall vector optimization") {
  const World& w = kele::testing::small_world();
  const Model& m = kele::testing::small_trained_model();
  const EditorConfig cfg = small_editor();
  const EditRequest e = some_edit(w, 5);
  const auto prefixes = sample_prefixes(m, cfg.n_prefixes, cfg.prefix_lengths, 1);
  const EditSolution s = optimize_recall_vector(m, w, e, cfg, prefixes);
  const EditObjective obj(m, w, e, cfg, prefixes);
  CHECK(s.value == obj.base_value() + s.offset);
  REQUIRE(!s.trace.empty());
  CHECK(s.trace.front().total == doctest::Approx(obj.evaluate(Vector::Zero(32)).total));
  for (std::size_t i = 1; i < s.trace.size(); ++i) {
    CHECK(std::isfinite(s.trace[i].total));
    CHECK(s.trace[i].total <= s.trace[i - 1].total);
  }
  CHECK(s.trace.back().inject < s.trace.front().inject);

  EditorConfig bad = cfg;
  bad.layer = 9;
  CHECK_THROWS_AS(optimize_recall_vector(m, w, e, bad, prefixes), std::out_of_range);
}

TEST_CASE("apply_edit") {
  const World& w = kele::testing::small_world();
  const Model& base = kele::testing::small_trained_model();
  const CovarianceEstimate cov = estimate_covariance(base, 1, w, 200, std::nullopt, 2);
  const EditorConfig cfg = small_editor();
  const EditRequest e = some_edit(w, 7);

  Model edited = base;
  const EditSolution s = apply_edit(edited, w, e, cov, cfg);

  SUBCASE("only the edited matrix changes") {
    const auto before = base.parameters();
    const auto after = edited.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) {
      INFO(before[i].first);
      if (before[i].first == "blocks.1.w_out") {
        CHECK(*after[i].second != *before[i].second);
      } else {
        CHECK(*after[i].second == *before[i].second);
      }
    }
    CHECK(s.delta_norm == doctest::Approx((edited.blocks[1].w_out - base.blocks[1].w_out).norm()));
  }
  SUBCASE("constraint holds and the new object gains probability") {
    CHECK((edited.blocks[1].w_out * s.key - s.value).norm() / s.value.norm() <= 1e-10);
    const std::vector<Tokens> bare(1);
    const Vector zero = Vector::Zero(base.config.d_model);
    CHECK(injection_loss(edited, w, 1, e, zero, bare) < injection_loss(base, w, 1, e, zero, bare));
  }
  SUBCASE("solution JSON round trip") {
    const EditSolution back = solution_from_json(solution_to_json(s));
    CHECK(back.key == s.key);
    CHECK(back.value == s.value);
    CHECK(back.offset == s.offset);
    CHECK(back.trace.size() == s.trace.size());
    CHECK(back.mode == s.mode);
    CHECK(back.post_edit_answer == s.post_edit_answer);
  }
  SUBCASE("deterministic") {
    Model again = base;
    apply_edit(again, w, e, cov, cfg);
    CHECK(serialize_model(again) == serialize_model(edited));
  }
}

TEST_CASE("k = 0 reduces to the baseline") {
  const World& w = kele::testing::small_world();
  const Model& base = kele::testing::small_trained_model();
  const CovarianceEstimate cov = estimate_covariance(base, 1, w, 200, std::nullopt, 2);
  EditorConfig kele_cfg = small_editor();
  kele_cfg.margin_rank = 0;
  EditorConfig rome_cfg = small_editor();
  rome_cfg.mode = EditMode::kRomeBaseline;
  rome_cfg.margin_rank = 3;  // ignored by the baseline

  for (std::size_t i : {1, 4, 9}) {
    Model a = base, b = base;
    const EditSolution sa = apply_edit(a, w, some_edit(w, i), cov, kele_cfg);
    const EditSolution sb = apply_edit(b, w, some_edit(w, i), cov, rome_cfg);
    CHECK(sa.offset == sb.offset);
    CHECK(serialize_model(a) == serialize_model(b));
  }

  EditorConfig k3 = small_editor();
  k3.margin_rank = 3;
  Model c = base, d = base;
  apply_edit(c, w, some_edit(w, 1), cov, k3);
  apply_edit(d, w, some_edit(w, 1), cov, rome_cfg);
  CHECK(serialize_model(c) != serialize_model(d));
}
