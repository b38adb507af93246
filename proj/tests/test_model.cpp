// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>

#include "fixtures.hpp"
#include "kele/util.hpp"

using namespace kele;
using kele::testing::random_matrix;
using kele::testing::tiny_config;

namespace {

// Plain-loop forward up to the FFN key of `layer`, written without the tape.
Matrix reference_keys(const Model& m, const Tokens& toks, int layer) {
  const ModelConfig& c = m.config;
  const auto T = static_cast<Eigen::Index>(toks.size());
  Matrix x(c.d_model, T);
  for (Eigen::Index t = 0; t < T; ++t) x.col(t) = m.token_embedding.col(toks[t]) + m.position_embedding.col(t);
  auto ln = [](const Matrix& in, const Matrix& g, const Matrix& b) {
    Matrix out(in.rows(), in.cols());
    for (Eigen::Index t = 0; t < in.cols(); ++t) {
      double mean = 0.0;
      for (Eigen::Index i = 0; i < in.rows(); ++i) mean += in(i, t);
      mean /= static_cast<double>(in.rows());
      double var = 0.0;
      for (Eigen::Index i = 0; i < in.rows(); ++i) var += (in(i, t) - mean) * (in(i, t) - mean);
      var /= static_cast<double>(in.rows());
      for (Eigen::Index i = 0; i < in.rows(); ++i) out(i, t) = (in(i, t) - mean) / std::sqrt(var + 1e-5) * g(i) + b(i);
    }
    return out;
  };
  const int dh = c.d_model / c.n_heads;
  for (int l = 0; l <= layer; ++l) {
    const Block& b = m.blocks[static_cast<std::size_t>(l)];
    const Matrix a = ln(x, b.ln1_gain, b.ln1_bias);
    const Matrix q = b.w_q * a, k = b.w_k * a, v = b.w_v * a;
    Matrix att = Matrix::Zero(c.d_model, T);
    for (int h = 0; h < c.n_heads; ++h) {
      for (Eigen::Index i = 0; i < T; ++i) {
        std::vector<double> w(static_cast<std::size_t>(i + 1));
        double top = -1e300;
        for (Eigen::Index j = 0; j <= i; ++j) {
          double s = 0.0;
          for (int r = 0; r < dh; ++r) s += q(h * dh + r, i) * k(h * dh + r, j);
          w[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
          top = std::max(top, w[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (double& s : w) z += (s = std::exp(s - top));
        for (Eigen::Index j = 0; j <= i; ++j)
          for (int r = 0; r < dh; ++r) att(h * dh + r, i) += w[static_cast<std::size_t>(j)] / z * v(h * dh + r, j);
      }
    }
    x += b.w_o * att;
    const Matrix key = gelu(b.w_in * ln(x, b.ln2_gain, b.ln2_bias));
    if (l == layer) return key;
    x += b.w_out * key;
  }
  return {};
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.d_ffn = 4;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("init is deterministic per seed") {
  CHECK(Model::init(tiny_config()).checksum() == Model::init(tiny_config()).checksum());
  CHECK(Model::init(tiny_config(24, 1)).checksum() != Model::init(tiny_config(24, 2)).checksum());
}

TEST_CASE("forward shapes, errors and causality") {
  const Model m = Model::init(tiny_config());
  const Tokens toks = {1, 7, 9, 4};
  const ForwardResult r = forward(m, toks);
  CHECK(r.logits.rows() == 24);
  CHECK(r.logits.cols() == 4);
  CHECK_THROWS_AS(forward(m, Tokens{}), std::invalid_argument);
  CHECK_THROWS_AS(forward(m, Tokens{1, 24}), std::out_of_range);
  CHECK_THROWS_AS(forward(m, Tokens(13, 1)), std::invalid_argument);

  Tokens changed = toks;
  changed[3] = 11;
  const ForwardResult r2 = forward(m, changed);
  CHECK(r.logits.leftCols(3) == r2.logits.leftCols(3));
}

TEST_CASE("interventions") {
  const Model m = Model::init(tiny_config());
  const Tokens toks = {1, 7, 9, 4, 2};
  const Matrix plain = forward(m, toks).logits;

  SUBCASE("zero offset is bit-identical") {
    for (int layer = 0; layer < 2; ++layer)
      for (int pos = 0; pos < 5; ++pos) {
        const Matrix z = forward(m, toks, Intervention{layer, pos, Vector::Zero(8)}).logits;
        CHECK(z == plain);
      }
  }
  SUBCASE("locality") {
    const Matrix moved = forward(m, toks, Intervention{1, 2, random_matrix(8, 1, 3)}).logits;
    CHECK(moved.leftCols(2) == plain.leftCols(2));
    CHECK(moved.col(2) != plain.col(2));
  }
  SUBCASE("offset equals a value shift") {
    const Vector h = random_matrix(8, 1, 4);
    const ForwardResult a = forward(m, toks, Intervention{0, 1, h}, RecordFlags{false, true, 1});
    const ForwardResult b = forward(m, toks, std::nullopt, RecordFlags{false, true, 1});
    CHECK((a.record->values[0] - b.record->values[0] - h).cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("bounds") {
    CHECK_THROWS_AS(forward(m, toks, Intervention{2, 0, Vector::Zero(8)}), std::out_of_range);
    CHECK_THROWS_AS(forward(m, toks, Intervention{0, 5, Vector::Zero(8)}), std::out_of_range);
    CHECK_THROWS_AS(forward(m, toks, Intervention{0, 0, Vector::Zero(3)}), ShapeError);
  }
}

TEST_CASE("ffn gates") {
  const Model m = Model::init(tiny_config(24, 3));
  Batch batch;
  batch.add(Tokens{1, 7, 9, 4, 2});
  auto logits = [&](const Model& model, std::span<const Matrix> gates) {
    Tape tape;
    return build_forward(tape, model, bind_constants(tape, model), batch, {}, Readout::kAll, gates).logits.value();
  };
  const Matrix plain = logits(m, {});
  std::vector<Matrix> gates(2, Matrix::Ones(8, 5));
  CHECK(logits(m, gates) == plain);

  gates[0].setZero();
  Model no_ffn = m;
  no_ffn.blocks[0].w_out.setZero();
  CHECK((logits(m, gates) - logits(no_ffn, {})).cwiseAbs().maxCoeff() <= 1e-12);

  // Closing one column cancels that token's FFN output.
  gates[0].setOnes();
  gates[1].col(3).setZero();
  const Vector v = forward(m, batch.tokens, std::nullopt, RecordFlags{false, true, 3}).record->values[1];
  const Matrix cancelled = forward(m, batch.tokens, Intervention{1, 3, -v}).logits;
  CHECK((logits(m, gates) - cancelled).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("ffn_key") {
  const Model m = Model::init(tiny_config());
  const Tokens toks = {3, 12, 8, 19, 4};
  SUBCASE("matches the recorded key") {
    const ForwardResult r = forward(m, toks, std::nullopt, RecordFlags{true, false, 2});
    CHECK(ffn_key(m, toks, 1, 2) == r.record->keys[1]);
  }
  SUBCASE("zero input projection gives gelu(0)") {
    Model z = m;
    z.blocks[0].w_in.setZero();
    CHECK(ffn_key(z, toks, 0, 3) == Vector::Zero(16));
  }
  SUBCASE("duplicate-path oracle") {
    for (int layer = 0; layer < 2; ++layer) {
      const Matrix ref = reference_keys(m, toks, layer);
      for (int pos = 0; pos < 5; ++pos) {
        CHECK((ffn_key(m, toks, layer, pos) - ref.col(pos)).cwiseAbs().maxCoeff() <= 1e-12);
      }
    }
  }
}

TEST_CASE("next-token distribution and generation") {
  const Model m = Model::init(tiny_config());
  const Tokens toks = {1, 5, 6};
  const Vector p = next_token_distribution(m, toks);
  CHECK(std::fabs(p.sum() - 1.0) <= 1e-12);
  CHECK((p - softmax(forward(m, toks).logits.col(2))).cwiseAbs().maxCoeff() == 0.0);
  // Small init: close to uniform.
  CHECK(p.maxCoeff() < 2.0 / 24.0);

  CHECK(generate(m, toks, 0) == toks);
  const Tokens two = generate(m, toks, 2);
  const Tokens one = generate(m, toks, 1);
  CHECK(Tokens(two.begin(), two.begin() + 4) == one);
  CHECK(generate(m, Tokens(12, 1), 3).size() == 12);

  Vector tie(4);
  tie << 1.0, 3.0, 3.0, 0.0;
  CHECK(argmax_token(tie) == 1);
}

TEST_CASE("batched logits equal single forwards") {
  const Model m = Model::init(tiny_config());
  const std::vector<Tokens> prompts = {{1, 2, 3}, {4, 5}, {6, 7, 8, 9, 10}};
  const Matrix all = batch_last_logits(m, prompts);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    CHECK((all.col(static_cast<Eigen::Index>(i)) - next_token_logits(m, prompts[i])).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("composite loss gradient matches central differences") {
  const Model m = Model::init(tiny_config(24, 9));
  Batch batch;
  batch.add(Tokens{1, 7, 9, 4});
  batch.add(Tokens{2, 8, 3});
  // Each parameter tensor in turn becomes the differentiated leaf.
  for (const auto& [name, ptr] : m.parameters()) {
    auto f = [&, name = name](Tape& tape, Var x) {
      ParamVars p = bind_constants(tape, m);
      auto use = [&](Var& slot, const std::string& n) {
        if (n == name) slot = x;
      };
      use(p.token_embedding, "token_embedding");
      use(p.position_embedding, "position_embedding");
      for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const std::string pre = "blocks." + std::to_string(l) + ".";
        auto& b = p.blocks[l];
        use(b.ln1_gain, pre + "ln1_gain");
        use(b.ln1_bias, pre + "ln1_bias");
        use(b.w_q, pre + "w_q");
        use(b.w_k, pre + "w_k");
        use(b.w_v, pre + "w_v");
        use(b.w_o, pre + "w_o");
        use(b.ln2_gain, pre + "ln2_gain");
        use(b.ln2_bias, pre + "ln2_bias");
        use(b.w_in, pre + "w_in");
        use(b.w_out, pre + "w_out");
      }
      use(p.lnf_gain, "lnf_gain");
      use(p.lnf_bias, "lnf_bias");
      use(p.unembedding, "unembedding");
      const GraphOutputs g = build_forward(tape, m, p, batch, {}, Readout::kLast);
      return ad::nll_cols(ad::log_softmax_cols(g.logits), {5, 11});
    };
    const double err = finite_diff_check(f, *ptr, 1e-5);
    INFO(name);
    CHECK(err <= 1e-6);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = kele::testing::temp_dir("ckpt");
  Model m = Model::init(tiny_config());
  m.config.vocab_checksum = "abc";
  const auto path = dir / "m.ckpt";
  save_model(m, path);
  const std::string bytes = read_file(path);
  CHECK(bytes.substr(0, 6) == "KELE1\n");

  const Model back = load_model(path);
  CHECK(back.config == m.config);
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(*back.parameters()[i].second == *m.parameters()[i].second);
  }
  save_model(back, dir / "again.ckpt");
  CHECK(read_file(dir / "again.ckpt") == bytes);

  const Tokens probe = {1, 2, 3, 4};
  CHECK(forward(back, probe).logits == forward(m, probe).logits);

  SUBCASE("payload is 8-byte aligned") {
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[6 + i])) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.substr(14, hlen));
    const std::size_t payload = (14 + hlen + 7) / 8 * 8;
    CHECK(payload % 8 == 0);
    std::size_t total = 0;
    for (const auto& [name, t] : header.at("tensors").items()) {
      CHECK(t.at("dtype") == "f64");
      CHECK(t.at("offset").get<std::size_t>() % 8 == 0);
      total += t.at("length").get<std::size_t>();
    }
    CHECK(payload + total == bytes.size());
  }
  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    try {
      deserialize_model(bad);
      FAIL("expected error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kBadMagic);
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }
  SUBCASE("truncated payload") {
    try {
      deserialize_model(std::string_view(bytes).substr(0, bytes.size() - 8));
      FAIL("expected error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kTruncatedPayload);
    }
  }
  SUBCASE("malformed header") {
    std::string bad = bytes;
    bad[15] = '!';
    try {
      deserialize_model(bad);
      FAIL("expected error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kMalformedHeader);
    }
  }
  SUBCASE("shape mismatch") {
    std::uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[6 + i])) << (8 * i);
    std::string head = bytes.substr(14, hlen);
    const auto pos = head.find("\"shape\":[8,24]");
    REQUIRE(pos != std::string::npos);
    head.replace(pos, 14, "\"shape\":[24,8]");
    const std::string bad = bytes.substr(0, 14) + head + bytes.substr(14 + hlen);
    try {
      deserialize_model(bad);
      FAIL("expected error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::kShapeMismatch);
    }
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_model(dir / "nope.ckpt"), IoError); }
}
