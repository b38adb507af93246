// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy pre-layer-norm decoder transformer. Every block is attention followed by
// an FFN whose hidden activation gelu(W_in * x) is the FFN "key" and whose
// output W_out * key is the FFN "value" written into the residual stream.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kele/tensor.hpp"

namespace kele {

using TokenId = int;
using Tokens = std::vector<TokenId>;

struct ModelConfig {
  int vocab_size = 280;
  int d_model = 64;
  int d_ffn = 256;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq = 16;
  std::uint64_t seed = 0;
  /// Checksum of the token map the model was trained on; empty if unknown.
  std::string vocab_checksum;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Block {
  Matrix ln1_gain, ln1_bias;
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  Matrix ln2_gain, ln2_bias;
  Matrix w_in;   // d_ffn x d_model
  Matrix w_out;  // d_model x d_ffn; the matrix edited in place
};

struct Model {
  ModelConfig config;
  Matrix token_embedding;     // d_model x vocab
  Matrix position_embedding;  // d_model x max_seq
  std::vector<Block> blocks;
  Matrix lnf_gain, lnf_bias;
  Matrix unembedding;  // vocab x d_model

  /// Random initialization from config.seed.
  static Model init(const ModelConfig& config);

  /// Stable name -> tensor listing used by checkpoints and the optimizer.
  std::vector<std::pair<std::string, Matrix*>> parameters();
  std::vector<std::pair<std::string, const Matrix*>> parameters() const;

  /// SHA-256 over the config and every parameter's raw bytes.
  std::string checksum() const;
};

/// Adds `offset` to the FFN output of `layer` at token `position`, before the
/// residual addition.
struct Intervention {
  int layer = 0;
  int position = 0;
  Vector offset;
};

struct RecordFlags {
  bool keys = false;
  bool values = false;
  /// Token index to record; negative counts from the end.
  int position = -1;
};

struct ActivationRecord {
  int position = 0;
  std::vector<Vector> keys;    // per layer, d_ffn
  std::vector<Vector> values;  // per layer, d_model
  Vector final_logits;         // vocab, last position
};

struct ForwardResult {
  Matrix logits;  // vocab x T
  std::optional<ActivationRecord> record;
};

ForwardResult forward(const Model& model, std::span<const TokenId> tokens,
                      const std::optional<Intervention>& intervention = std::nullopt, RecordFlags record = {});

Vector ffn_key(const Model& model, std::span<const TokenId> tokens, int layer, int position);

Vector next_token_logits(const Model& model, std::span<const TokenId> tokens,
                         const std::optional<Intervention>& intervention = std::nullopt);
Vector next_token_distribution(const Model& model, std::span<const TokenId> tokens,
                               const std::optional<Intervention>& intervention = std::nullopt);

/// Lowest index among the maxima.
TokenId argmax_token(const Vector& scores);

/// Greedy continuation by max_new tokens; stops early at max_seq.
Tokens generate(const Model& model, std::span<const TokenId> tokens, int max_new);

void validate_tokens(const Model& model, std::span<const TokenId> tokens);

/// Last-position logits for many prompts at once, vocab x prompts.
Matrix batch_last_logits(const Model& model, std::span<const Tokens> prompts);

// ---------------------------------------------------------------------------
// Tape-level forward used by training and editing.

struct ParamVars {
  Var token_embedding, position_embedding;
  struct BlockVars {
    Var ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, w_in, w_out;
  };
  std::vector<BlockVars> blocks;
  Var lnf_gain, lnf_bias, unembedding;

  /// Leaf handles in Model::parameters() order (empty when bound as constants).
  std::vector<Var> leaves;
};

ParamVars bind_constants(Tape& tape, const Model& model);
ParamVars bind_leaves(Tape& tape, const Model& model);

struct Batch {
  Tokens tokens;  // concatenated sequences
  std::vector<Segment> segments;

  void add(std::span<const TokenId> sequence);
  Eigen::Index last_column(std::size_t segment) const {
    return segments[segment].start + segments[segment].length - 1;
  }
};

struct TapeIntervention {
  int layer = 0;
  Eigen::Index column = 0;
  Var offset;
};

enum class Readout { kAll, kLast };

struct GraphOutputs {
  Var logits;               // vocab x T (kAll) or vocab x segments (kLast)
  std::vector<Var> keys;    // per layer, d_ffn x T
  std::vector<Var> values;  // per layer, d_model x T, after any intervention
};

/// ffn_gates, when given, holds one d_model x T matrix per block that
/// multiplies the block's FFN output before the residual addition.
GraphOutputs build_forward(Tape& tape, const Model& model, const ParamVars& params, const Batch& batch,
                           std::span<const TapeIntervention> interventions, Readout readout,
                           std::span<const Matrix> ffn_gates = {});

// ---------------------------------------------------------------------------
// Checkpoints: "KELE1\n", u64 LE header length, JSON header, zero padding to
// an 8-byte boundary, then raw little-endian f64 payload. Tensor offsets are
// relative to the payload start.

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kBadMagic, kMalformedHeader, kShapeMismatch, kTruncatedPayload };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string serialize_model(const Model& model);
Model deserialize_model(std::string_view bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace kele
