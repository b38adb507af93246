// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic fact world: entities, functional relations, single-hop facts and
// two-hop chains, plus the edit datasets built on top of them.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kele/model.hpp"

namespace kele {

using EntityId = int;
using RelationId = int;

/// Control tokens occupy the first ids of the vocabulary.
enum ControlToken : TokenId {
  kBos = 0,
  kQuery = 1,            // Q1: canonical single-hop
  kQueryParaphrase = 2,  // Q1P: paraphrase single-hop
  kQueryTwoHop = 3,      // Q2
  kAnswer = 4,           // A
  kAnchor = 5,           // ANC: subject-essence prompt
  kSelf = 6,             // identity relation, used only in training prompts
  kNumControlTokens = 7,
};

struct Fact {
  EntityId subject = 0;
  RelationId relation = 0;
  EntityId object = 0;
  bool operator==(const Fact&) const = default;
};

struct Chain {
  Fact first;
  Fact second;  // second.subject == first.object
  bool held_out = false;
  bool operator==(const Chain&) const = default;
};

struct EditRequest {
  Fact fact;
  EntityId new_object = 0;
  bool operator==(const EditRequest&) const = default;
};

struct MultiHopInstance {
  std::vector<EditRequest> edits;
  std::vector<Fact> chain;
  std::vector<Tokens> questions;
  EntityId original_answer = 0;
  EntityId new_answer = 0;
  bool operator==(const MultiHopInstance&) const = default;
};

struct WorldConfig {
  std::uint64_t seed = 7;
  int n_entities = 256;
  int n_relations = 12;
  int n_facts = 400;
  int n_chains = 150;
  int n_held_out = 50;
};

class World {
 public:
  World() = default;

  const WorldConfig& config() const { return config_; }
  int n_entities() const { return config_.n_entities; }
  int n_relations() const { return config_.n_relations; }
  int vocab_size() const { return kNumControlTokens + n_entities() + n_relations(); }

  const std::vector<Fact>& facts() const { return facts_; }
  const std::vector<Chain>& chains() const { return chains_; }

  TokenId entity_token(EntityId e) const;
  TokenId relation_token(RelationId r) const;
  /// Inverse of entity_token; nullopt for non-entity tokens.
  std::optional<EntityId> entity_of_token(TokenId t) const;

  std::optional<EntityId> object_of(EntityId s, RelationId r) const;
  /// Subjects having a fact with relation r, ascending.
  std::vector<EntityId> subjects_of(RelationId r) const;

  std::vector<Chain> training_chains() const;
  std::vector<Chain> held_out_chains() const;

  static World from_parts(WorldConfig config, std::vector<Fact> facts, std::vector<Chain> chains);

 private:
  void index();

  WorldConfig config_;
  std::vector<Fact> facts_;
  std::vector<Chain> chains_;
  std::map<std::pair<EntityId, RelationId>, EntityId> lookup_;
};

World generate_world(const WorldConfig& config);

/// Template 0: [Q1, s, r, A]. Template 1: [Q1P, r, s, A].
Tokens render_prompt(const World& world, EntityId subject, RelationId relation, int template_id = 0);
/// Index of the subject token inside render_prompt's output.
int subject_position(int template_id);
/// [Q2, s1, r1, r2, A].
Tokens render_multihop(const World& world, const Chain& chain);
/// Two-hop prompt for (s, r) where one hop is the identity relation:
/// [Q2, s, SELF, r, A] (identity_first) or [Q2, s, r, SELF, A].
Tokens render_identity_hop(const World& world, EntityId subject, RelationId relation, bool identity_first);
/// [ANC, s].
Tokens render_anchor(const World& world, EntityId subject);

/// Candidate replacements for the first hop of a chain: subjects of the second
/// relation other than the bridge whose second-hop object differs from the
/// original answer.
std::vector<EntityId> edit_candidates(const World& world, const Chain& chain);

std::vector<MultiHopInstance> make_edit_dataset(const World& world, int n_instances, std::uint64_t seed,
                                                int edits_per_instance = 1);

struct NeighborPrompt {
  Fact fact;
  Tokens prompt;
};

std::vector<NeighborPrompt> neighborhood_prompts(const World& world, const EditRequest& edit, int n);

/// Walks the fact table with edits applied.
std::optional<EntityId> edited_object(const World& world, std::span<const EditRequest> edits, EntityId s,
                                      RelationId r);

/// SHA-256 of the token layout (control, entity and relation counts).
std::string vocab_checksum(const World& world);

nlohmann::json world_to_json(const World& world);
World world_from_json(const nlohmann::json& j);
void save_world(const World& world, const std::filesystem::path& path);
World load_world(const std::filesystem::path& path);

nlohmann::json instance_to_json(const MultiHopInstance& inst);
MultiHopInstance instance_from_json(const nlohmann::json& j);
void export_dataset(const std::vector<MultiHopInstance>& data, const std::filesystem::path& path);
std::vector<MultiHopInstance> import_dataset(const std::filesystem::path& path);

class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace kele
