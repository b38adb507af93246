// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/model.hpp"

#include <algorithm>
#include <cstring>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

#include "kele/util.hpp"

namespace kele {

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("ModelConfig: " + msg);
  };
  need(vocab_size >= 1 && d_model >= 1 && d_ffn >= 1 && n_layers >= 1 && n_heads >= 1 && max_seq >= 1,
       "all counts must be >= 1");
  need(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  need(d_ffn >= d_model, "d_ffn must be >= d_model");
  need(d_model >= 2, "d_model must be >= 2 for layer norm");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"d_ffn", c.d_ffn},
                     {"n_layers", c.n_layers},     {"n_heads", c.n_heads}, {"max_seq", c.max_seq},
                     {"seed", c.seed}};
  if (!c.vocab_checksum.empty()) j["vocab_checksum"] = c.vocab_checksum;
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ffn").get_to(c.d_ffn);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("max_seq").get_to(c.max_seq);
  j.at("seed").get_to(c.seed);
  c.vocab_checksum = j.value("vocab_checksum", std::string{});
}

Model Model::init(const ModelConfig& config) {
  config.validate();
  boost::random::mt19937_64 rng(config.seed);
  boost::random::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](Eigen::Index r, Eigen::Index c, double stddev) {
    Matrix m(r, c);
    // Fill in row-major order so the layout is independent of storage order.
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = stddev * normal(rng);
    return m;
  };
  const int d = config.d_model;
  const int f = config.d_ffn;
  const double base = 0.02;
  const double resid = base / std::sqrt(2.0 * config.n_layers);

  Model m;
  m.config = config;
  m.token_embedding = randn(d, config.vocab_size, base);
  m.position_embedding = randn(d, config.max_seq, base);
  for (int l = 0; l < config.n_layers; ++l) {
    Block b;
    b.ln1_gain = Matrix::Ones(d, 1);
    b.ln1_bias = Matrix::Zero(d, 1);
    b.w_q = randn(d, d, base);
    b.w_k = randn(d, d, base);
    b.w_v = randn(d, d, base);
    b.w_o = randn(d, d, resid);
    b.ln2_gain = Matrix::Ones(d, 1);
    b.ln2_bias = Matrix::Zero(d, 1);
    b.w_in = randn(f, d, base);
    b.w_out = randn(d, f, resid);
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gain = Matrix::Ones(d, 1);
  m.lnf_bias = Matrix::Zero(d, 1);
  m.unembedding = randn(config.vocab_size, d, base);
  return m;
}

std::vector<std::pair<std::string, const Matrix*>> Model::parameters() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  out.emplace_back("token_embedding", &token_embedding);
  out.emplace_back("position_embedding", &position_embedding);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const Block& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gain", &b.ln1_gain);
    out.emplace_back(p + "ln1_bias", &b.ln1_bias);
    out.emplace_back(p + "w_q", &b.w_q);
    out.emplace_back(p + "w_k", &b.w_k);
    out.emplace_back(p + "w_v", &b.w_v);
    out.emplace_back(p + "w_o", &b.w_o);
    out.emplace_back(p + "ln2_gain", &b.ln2_gain);
    out.emplace_back(p + "ln2_bias", &b.ln2_bias);
    out.emplace_back(p + "w_in", &b.w_in);
    out.emplace_back(p + "w_out", &b.w_out);
  }
  out.emplace_back("lnf_gain", &lnf_gain);
  out.emplace_back("lnf_bias", &lnf_bias);
  out.emplace_back("unembedding", &unembedding);
  return out;
}

std::vector<std::pair<std::string, Matrix*>> Model::parameters() {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (auto& [name, ptr] : std::as_const(*this).parameters()) out.emplace_back(name, const_cast<Matrix*>(ptr));
  return out;
}

std::string Model::checksum() const { return sha256_hex(serialize_model(*this)); }

// ---------------------------------------------------------------------------

void validate_tokens(const Model& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > model.config.max_seq) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                                std::to_string(model.config.max_seq));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= model.config.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                              " outside vocabulary of " + std::to_string(model.config.vocab_size));
    }
  }
}

void Batch::add(std::span<const TokenId> sequence) {
  segments.push_back(Segment{static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(sequence.size())});
  tokens.insert(tokens.end(), sequence.begin(), sequence.end());
}

namespace {

template <typename Bind>
ParamVars bind_with(const Model& model, Bind bind) {
  ParamVars p;
  p.token_embedding = bind(model.token_embedding);
  p.position_embedding = bind(model.position_embedding);
  for (const Block& b : model.blocks) {
    p.blocks.push_back({bind(b.ln1_gain), bind(b.ln1_bias), bind(b.w_q), bind(b.w_k), bind(b.w_v), bind(b.w_o),
                        bind(b.ln2_gain), bind(b.ln2_bias), bind(b.w_in), bind(b.w_out)});
  }
  p.lnf_gain = bind(model.lnf_gain);
  p.lnf_bias = bind(model.lnf_bias);
  p.unembedding = bind(model.unembedding);
  return p;
}

}  // namespace

ParamVars bind_constants(Tape& tape, const Model& model) {
  return bind_with(model, [&](const Matrix& m) { return tape.constant_ref(m); });
}

ParamVars bind_leaves(Tape& tape, const Model& model) {
  std::vector<Var> leaves;
  ParamVars p = bind_with(model, [&](const Matrix& m) {
    Var v = tape.leaf_ref(m);
    leaves.push_back(v);
    return v;
  });
  // bind_with visits tensors in Model::parameters() order.
  p.leaves = std::move(leaves);
  return p;
}

GraphOutputs build_forward(Tape& tape, const Model& model, const ParamVars& params, const Batch& batch,
                           std::span<const TapeIntervention> interventions, Readout readout,
                           std::span<const Matrix> ffn_gates) {
  const ModelConfig& cfg = model.config;
  std::vector<Eigen::Index> ids(batch.tokens.begin(), batch.tokens.end());
  std::vector<Eigen::Index> positions;
  positions.reserve(ids.size());
  for (const Segment& s : batch.segments) {
    if (s.length > cfg.max_seq) throw std::invalid_argument("build_forward: segment longer than max_seq");
    for (Eigen::Index t = 0; t < s.length; ++t) positions.push_back(t);
  }
  for (const TapeIntervention& iv : interventions) {
    if (iv.layer < 0 || iv.layer >= cfg.n_layers) {
      throw std::out_of_range("intervention layer " + std::to_string(iv.layer) + " outside [0, " +
                              std::to_string(cfg.n_layers) + ")");
    }
    if (iv.column < 0 || iv.column >= static_cast<Eigen::Index>(ids.size())) {
      throw std::out_of_range("intervention position " + std::to_string(iv.column) + " outside sequence");
    }
  }
  if (!ffn_gates.empty()) {
    if (static_cast<int>(ffn_gates.size()) != cfg.n_layers) throw ShapeError("build_forward: one gate per block");
    for (const Matrix& g : ffn_gates) {
      if (g.rows() != cfg.d_model || g.cols() != static_cast<Eigen::Index>(ids.size())) {
        throw ShapeError("build_forward: gate " + shape_of(g) + " does not match the residual stream");
      }
    }
  }

  GraphOutputs out;
  Var x = ad::add(ad::gather_cols(params.token_embedding, std::move(ids)),
                  ad::gather_cols(params.position_embedding, std::move(positions)));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& b = params.blocks[static_cast<std::size_t>(l)];
    std::optional<Var> gate;
    if (!ffn_gates.empty()) gate = tape.constant_ref(ffn_gates[static_cast<std::size_t>(l)]);
    Var a = ad::layer_norm_cols(x, b.ln1_gain, b.ln1_bias);
    Var att = ad::causal_attention(ad::matmul(b.w_q, a), ad::matmul(b.w_k, a), ad::matmul(b.w_v, a), batch.segments,
                                   cfg.n_heads);
    Var att_out = ad::matmul(b.w_o, att);
    x = ad::add(x, att_out);
    Var m = ad::layer_norm_cols(x, b.ln2_gain, b.ln2_bias);
    Var key = ad::gelu(ad::matmul(b.w_in, m));
    Var value = ad::matmul(b.w_out, key);
    for (const TapeIntervention& iv : interventions) {
      if (iv.layer == l) value = ad::add_to_col(value, iv.column, iv.offset);
    }
    out.keys.push_back(key);
    out.values.push_back(value);
    x = ad::add(x, gate ? ad::mul(*gate, value) : value);
  }
  if (readout == Readout::kLast) {
    std::vector<Eigen::Index> last;
    for (std::size_t s = 0; s < batch.segments.size(); ++s) last.push_back(batch.last_column(s));
    x = ad::select_cols(x, std::move(last));
  }
  out.logits = ad::matmul(params.unembedding, ad::layer_norm_cols(x, params.lnf_gain, params.lnf_bias));
  return out;
}

ForwardResult forward(const Model& model, std::span<const TokenId> tokens,
                      const std::optional<Intervention>& intervention, RecordFlags record) {
  validate_tokens(model, tokens);
  const auto len = static_cast<int>(tokens.size());
  Tape tape;
  ParamVars params = bind_constants(tape, model);
  Batch batch;
  batch.add(tokens);
  std::vector<TapeIntervention> ivs;
  if (intervention) {
    if (intervention->position < 0 || intervention->position >= len) {
      throw std::out_of_range("intervention position " + std::to_string(intervention->position) +
                              " outside sequence of length " + std::to_string(len));
    }
    if (intervention->offset.size() != model.config.d_model) {
      throw ShapeError("intervention offset width " + std::to_string(intervention->offset.size()) + " != d_model " +
                       std::to_string(model.config.d_model));
    }
    ivs.push_back({intervention->layer, intervention->position, tape.constant(intervention->offset)});
  }
  GraphOutputs g = build_forward(tape, model, params, batch, ivs, Readout::kAll);

  ForwardResult result;
  result.logits = g.logits.value();
  if (record.keys || record.values) {
    const int pos = record.position < 0 ? len + record.position : record.position;
    if (pos < 0 || pos >= len) throw std::out_of_range("record position outside sequence");
    ActivationRecord rec;
    rec.position = pos;
    for (int l = 0; l < model.config.n_layers; ++l) {
      if (record.keys) rec.keys.push_back(g.keys[static_cast<std::size_t>(l)].value().col(pos));
      if (record.values) rec.values.push_back(g.values[static_cast<std::size_t>(l)].value().col(pos));
    }
    rec.final_logits = result.logits.col(len - 1);
    result.record = std::move(rec);
  }
  return result;
}

Matrix batch_last_logits(const Model& model, std::span<const Tokens> prompts) {
  constexpr std::size_t kChunk = 256;
  Matrix out(model.config.vocab_size, static_cast<Eigen::Index>(prompts.size()));
  for (std::size_t begin = 0; begin < prompts.size(); begin += kChunk) {
    const std::size_t end = std::min(prompts.size(), begin + kChunk);
    Tape tape;
    ParamVars params = bind_constants(tape, model);
    Batch batch;
    for (std::size_t i = begin; i < end; ++i) {
      validate_tokens(model, prompts[i]);
      batch.add(prompts[i]);
    }
    GraphOutputs g = build_forward(tape, model, params, batch, {}, Readout::kLast);
    out.middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) = g.logits.value();
  }
  return out;
}

Vector ffn_key(const Model& model, std::span<const TokenId> tokens, int layer, int position) {
  if (layer < 0 || layer >= model.config.n_layers) throw std::out_of_range("ffn_key: layer out of range");
  ForwardResult r = forward(model, tokens, std::nullopt, RecordFlags{true, false, position});
  return r.record->keys[static_cast<std::size_t>(layer)];
}

Vector next_token_logits(const Model& model, std::span<const TokenId> tokens,
                         const std::optional<Intervention>& intervention) {
  ForwardResult r = forward(model, tokens, intervention);
  return r.logits.col(r.logits.cols() - 1);
}

Vector next_token_distribution(const Model& model, std::span<const TokenId> tokens,
                               const std::optional<Intervention>& intervention) {
  return softmax(next_token_logits(model, tokens, intervention));
}

TokenId argmax_token(const Vector& scores) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < scores.size(); ++i) {
    if (scores(i) > scores(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

Tokens generate(const Model& model, std::span<const TokenId> tokens, int max_new) {
  validate_tokens(model, tokens);
  Tokens seq(tokens.begin(), tokens.end());
  for (int i = 0; i < max_new && static_cast<int>(seq.size()) < model.config.max_seq; ++i) {
    seq.push_back(argmax_token(next_token_logits(model, seq)));
  }
  return seq;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "KELE1\n";

std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

}  // namespace

std::string serialize_model(const Model& model) {
  nlohmann::json tensors = nlohmann::json::object();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, m] : model.parameters()) {
    const std::size_t offset = payload.size();
    // Row-major payload.
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index j = 0; j < m->cols(); ++j) append_f64_le(payload, (*m)(i, j));
    tensors[name] = {{"shape", {m->rows(), m->cols()}},
                     {"dtype", "f64"},
                     {"offset", offset},
                     {"length", payload.size() - offset}};
  }
  nlohmann::json header = {{"config", model.config}, {"tensors", tensors}};
  const std::string head = header.dump();

  std::string out(kMagic);
  const std::uint64_t hlen = head.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((hlen >> (8 * i)) & 0xff));
  out += head;
  out.resize(align8(out.size()), '\0');
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size());
  return out;
}

Model deserialize_model(std::string_view bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw CheckpointError(Kind::kBadMagic, "checkpoint: bad magic bytes (expected \"KELE1\\n\")");
  }
  if (bytes.size() < kMagic.size() + 8) throw CheckpointError(Kind::kMalformedHeader, "checkpoint: missing header length");
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) {
    hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[kMagic.size() + static_cast<std::size_t>(i)]))
            << (8 * i);
  }
  const std::size_t head_start = kMagic.size() + 8;
  if (hlen > bytes.size() - head_start) {
    throw CheckpointError(Kind::kMalformedHeader, "checkpoint: header length exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(head_start, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kMalformedHeader, std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = align8(head_start + hlen);
  const std::string_view payload = payload_start <= bytes.size() ? bytes.substr(payload_start) : std::string_view{};

  Model model;
  try {
    model.config = header.at("config").get<ModelConfig>();
    model.config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::kMalformedHeader, std::string("checkpoint: bad config: ") + e.what());
  }
  // Shapes come from a freshly initialised model of the same config.
  ModelConfig zero_cfg = model.config;
  Model shaped = Model::init(zero_cfg);
  shaped.config = model.config;
  model = std::move(shaped);

  const nlohmann::json* tensors = nullptr;
  if (!header.contains("tensors") || !(tensors = &header["tensors"])->is_object()) {
    throw CheckpointError(Kind::kMalformedHeader, "checkpoint: missing field \"tensors\"");
  }
  for (auto& [name, m] : model.parameters()) {
    if (!tensors->contains(name)) throw CheckpointError(Kind::kMalformedHeader, "checkpoint: missing tensor " + name);
    const nlohmann::json& t = (*tensors)[name];
    std::size_t offset = 0, length = 0;
    Eigen::Index rows = 0, cols = 0;
    try {
      if (t.at("dtype").get<std::string>() != "f64") {
        throw CheckpointError(Kind::kMalformedHeader, "checkpoint: tensor " + name + " dtype must be f64");
      }
      rows = t.at("shape").at(0).get<Eigen::Index>();
      cols = t.at("shape").at(1).get<Eigen::Index>();
      offset = t.at("offset").get<std::size_t>();
      length = t.at("length").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(Kind::kMalformedHeader, "checkpoint: tensor " + name + ": " + e.what());
    }
    if (rows != m->rows() || cols != m->cols() || length != static_cast<std::size_t>(rows * cols) * 8) {
      throw CheckpointError(Kind::kShapeMismatch, "checkpoint: tensor " + name + " has shape " +
                                                      shape_string(rows, cols) + ", config implies " +
                                                      shape_string(m->rows(), m->cols()));
    }
    if (offset % 8 != 0 || offset > payload.size() || length > payload.size() - offset) {
      throw CheckpointError(Kind::kTruncatedPayload, "checkpoint: payload truncated in tensor " + name);
    }
    const auto* p = reinterpret_cast<const std::uint8_t*>(payload.data()) + offset;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) (*m)(i, j) = read_f64_le(p + 8 * (i * cols + j));
  }
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_model(model));
}

Model load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace kele
