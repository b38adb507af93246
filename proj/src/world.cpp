// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/world.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include "kele/util.hpp"

namespace kele {
namespace {

using Rng = boost::random::mt19937_64;

int uniform_int(Rng& rng, int lo, int hi) { return boost::random::uniform_int_distribution<int>(lo, hi)(rng); }

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

TokenId World::entity_token(EntityId e) const {
  if (e < 0 || e >= n_entities()) throw std::out_of_range("unknown entity " + std::to_string(e));
  return kNumControlTokens + e;
}

TokenId World::relation_token(RelationId r) const {
  if (r < 0 || r >= n_relations()) throw std::out_of_range("unknown relation " + std::to_string(r));
  return kNumControlTokens + n_entities() + r;
}

std::optional<EntityId> World::entity_of_token(TokenId t) const {
  const int e = t - kNumControlTokens;
  if (e < 0 || e >= n_entities()) return std::nullopt;
  return e;
}

std::optional<EntityId> World::object_of(EntityId s, RelationId r) const {
  auto it = lookup_.find({s, r});
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::vector<EntityId> World::subjects_of(RelationId r) const {
  std::vector<EntityId> out;
  for (const Fact& f : facts_) {
    if (f.relation == r) out.push_back(f.subject);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Chain> World::training_chains() const {
  std::vector<Chain> out;
  std::copy_if(chains_.begin(), chains_.end(), std::back_inserter(out), [](const Chain& c) { return !c.held_out; });
  return out;
}

std::vector<Chain> World::held_out_chains() const {
  std::vector<Chain> out;
  std::copy_if(chains_.begin(), chains_.end(), std::back_inserter(out), [](const Chain& c) { return c.held_out; });
  return out;
}

void World::index() {
  lookup_.clear();
  for (const Fact& f : facts_) {
    if (f.subject < 0 || f.subject >= n_entities() || f.object < 0 || f.object >= n_entities() || f.relation < 0 ||
        f.relation >= n_relations()) {
      throw std::invalid_argument("world: fact references unknown symbol");
    }
    if (!lookup_.emplace(std::pair{f.subject, f.relation}, f.object).second) {
      throw std::invalid_argument("world: relation " + std::to_string(f.relation) + " is not functional at subject " +
                                  std::to_string(f.subject));
    }
  }
  for (const Chain& c : chains_) {
    if (c.first.object != c.second.subject) throw std::invalid_argument("world: chain is not linked");
    if (object_of(c.first.subject, c.first.relation) != c.first.object ||
        object_of(c.second.subject, c.second.relation) != c.second.object) {
      throw std::invalid_argument("world: chain hop missing from fact table");
    }
  }
}

World World::from_parts(WorldConfig config, std::vector<Fact> facts, std::vector<Chain> chains) {
  World w;
  w.config_ = config;
  w.facts_ = std::move(facts);
  w.chains_ = std::move(chains);
  w.config_.n_facts = static_cast<int>(w.facts_.size());
  w.config_.n_chains = static_cast<int>(w.chains_.size());
  w.config_.n_held_out =
      static_cast<int>(std::count_if(w.chains_.begin(), w.chains_.end(), [](const Chain& c) { return c.held_out; }));
  w.index();
  return w;
}

std::vector<EntityId> edit_candidates(const World& world, const Chain& chain) {
  std::vector<EntityId> out;
  for (EntityId c : world.subjects_of(chain.second.relation)) {
    if (c == chain.first.object) continue;
    if (world.object_of(c, chain.second.relation) == chain.second.object) continue;
    out.push_back(c);
  }
  return out;
}

World generate_world(const WorldConfig& config) {
  const int n_e = config.n_entities;
  const int n_r = config.n_relations;
  if (n_e < 2 || n_r < 1 || config.n_facts < 1 || config.n_chains < 0 || config.n_held_out < 0) {
    throw std::invalid_argument("generate_world: counts must be positive");
  }
  if (config.n_facts < n_e) {
    throw std::invalid_argument("generate_world: infeasible counts: " + std::to_string(config.n_facts) +
                                " facts cannot cover " + std::to_string(n_e) + " entities");
  }
  if (static_cast<long>(config.n_facts) > static_cast<long>(n_e) * n_r) {
    throw std::invalid_argument("generate_world: infeasible counts: more facts than (subject, relation) pairs");
  }
  if (config.n_held_out > config.n_chains) {
    throw std::invalid_argument("generate_world: held-out chains exceed chain count");
  }

  Rng rng(config.seed);
  std::vector<EntityId> cover(static_cast<std::size_t>(n_e));
  for (int e = 0; e < n_e; ++e) cover[static_cast<std::size_t>(e)] = e;
  shuffle(cover, rng);

  std::set<std::pair<EntityId, RelationId>> used;
  std::vector<int> per_relation(static_cast<std::size_t>(n_r), 0);
  std::vector<Fact> facts;
  facts.reserve(static_cast<std::size_t>(config.n_facts));
  for (int i = 0; i < config.n_facts; ++i) {
    // Round-robin over relations with room left.
    RelationId r = i % n_r;
    while (per_relation[static_cast<std::size_t>(r)] >= n_e - 1) r = (r + 1) % n_r;
    const EntityId o = i < n_e ? cover[static_cast<std::size_t>(i)] : uniform_int(rng, 0, n_e - 1);
    EntityId s = 0;
    do {
      s = uniform_int(rng, 0, n_e - 1);
    } while (s == o || used.count({s, r}) != 0);
    used.insert({s, r});
    ++per_relation[static_cast<std::size_t>(r)];
    facts.push_back(Fact{s, r, o});
  }

  World probe = World::from_parts(config, facts, {});
  std::vector<Chain> pool;
  for (const Fact& f1 : facts) {
    for (const Fact& f2 : facts) {
      if (f2.subject != f1.object) continue;
      Chain c{f1, f2, false};
      if (edit_candidates(probe, c).empty()) continue;
      pool.push_back(c);
    }
  }
  shuffle(pool, rng);

  std::vector<Chain> chains;
  std::set<std::pair<EntityId, RelationId>> first_hops;
  for (const Chain& c : pool) {
    if (static_cast<int>(chains.size()) == config.n_chains) break;
    if (!first_hops.insert({c.first.subject, c.first.relation}).second) continue;
    chains.push_back(c);
  }
  if (static_cast<int>(chains.size()) < config.n_chains) {
    throw std::invalid_argument("generate_world: infeasible counts: only " + std::to_string(chains.size()) +
                                " chains with distinct first hops available, " + std::to_string(config.n_chains) +
                                " requested");
  }
  for (int i = config.n_chains - config.n_held_out; i < config.n_chains; ++i) {
    chains[static_cast<std::size_t>(i)].held_out = true;
  }
  return World::from_parts(config, std::move(facts), std::move(chains));
}

int subject_position(int template_id) {
  switch (template_id) {
    case 0:
      return 1;
    case 1:
      return 2;
    default:
      throw std::invalid_argument("unknown template id " + std::to_string(template_id));
  }
}

Tokens render_prompt(const World& world, EntityId subject, RelationId relation, int template_id) {
  switch (template_id) {
    case 0:
      return {kQuery, world.entity_token(subject), world.relation_token(relation), kAnswer};
    case 1:
      return {kQueryParaphrase, world.relation_token(relation), world.entity_token(subject), kAnswer};
    default:
      throw std::invalid_argument("unknown template id " + std::to_string(template_id));
  }
}

Tokens render_multihop(const World& world, const Chain& chain) {
  if (chain.first.object != chain.second.subject) throw std::invalid_argument("render_multihop: chain not closed");
  return {kQueryTwoHop, world.entity_token(chain.first.subject), world.relation_token(chain.first.relation),
          world.relation_token(chain.second.relation), kAnswer};
}

Tokens render_identity_hop(const World& world, EntityId subject, RelationId relation, bool identity_first) {
  const TokenId s = world.entity_token(subject);
  const TokenId r = world.relation_token(relation);
  if (identity_first) return {kQueryTwoHop, s, kSelf, r, kAnswer};
  return {kQueryTwoHop, s, r, kSelf, kAnswer};
}

Tokens render_anchor(const World& world, EntityId subject) { return {kAnchor, world.entity_token(subject)}; }

std::optional<EntityId> edited_object(const World& world, std::span<const EditRequest> edits, EntityId s,
                                      RelationId r) {
  for (const EditRequest& e : edits) {
    if (e.fact.subject == s && e.fact.relation == r) return e.new_object;
  }
  return world.object_of(s, r);
}

std::vector<MultiHopInstance> make_edit_dataset(const World& world, int n_instances, std::uint64_t seed,
                                                int edits_per_instance) {
  if (edits_per_instance != 1 && edits_per_instance != 2) {
    throw std::invalid_argument("make_edit_dataset: edits per instance must be 1 or 2");
  }
  if (n_instances < 0 || n_instances > static_cast<int>(world.chains().size())) {
    throw std::invalid_argument("make_edit_dataset: insufficient chains: " + std::to_string(n_instances) +
                                " requested, " + std::to_string(world.chains().size()) + " available");
  }
  Rng rng(seed);
  std::vector<std::size_t> order(world.chains().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);

  std::vector<MultiHopInstance> out;
  std::set<std::pair<EntityId, RelationId>> edited;
  for (std::size_t idx : order) {
    if (static_cast<int>(out.size()) == n_instances) break;
    const Chain& c = world.chains()[idx];
    const std::vector<EntityId> cands = edit_candidates(world, c);
    const EntityId new_bridge = cands[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cands.size()) - 1))];

    MultiHopInstance inst;
    inst.chain = {c.first, c.second};
    inst.questions = {render_multihop(world, c)};
    inst.original_answer = c.second.object;
    inst.edits.push_back(EditRequest{c.first, new_bridge});
    if (edits_per_instance == 2) {
      const Fact hop2{new_bridge, c.second.relation, *world.object_of(new_bridge, c.second.relation)};
      EntityId target = 0;
      do {
        target = uniform_int(rng, 0, world.n_entities() - 1);
      } while (target == hop2.object || target == c.second.object);
      inst.edits.push_back(EditRequest{hop2, target});
    }
    const auto bridge = edited_object(world, inst.edits, c.first.subject, c.first.relation);
    inst.new_answer = *edited_object(world, inst.edits, *bridge, c.second.relation);

    bool clash = false;
    for (const EditRequest& e : inst.edits) clash |= edited.count({e.fact.subject, e.fact.relation}) != 0;
    if (clash) continue;
    for (const EditRequest& e : inst.edits) edited.insert({e.fact.subject, e.fact.relation});
    out.push_back(std::move(inst));
  }
  if (static_cast<int>(out.size()) < n_instances) {
    throw std::invalid_argument("make_edit_dataset: insufficient chains with disjoint edits: " +
                                std::to_string(out.size()) + " of " + std::to_string(n_instances));
  }
  return out;
}

std::vector<NeighborPrompt> neighborhood_prompts(const World& world, const EditRequest& edit, int n) {
  std::vector<EntityId> subjects = world.subjects_of(edit.fact.relation);
  std::erase(subjects, edit.fact.subject);
  if (n < 0 || n > static_cast<int>(subjects.size())) {
    throw std::invalid_argument("neighborhood_prompts: insufficient neighbors: " + std::to_string(n) +
                                " requested, " + std::to_string(subjects.size()) + " available");
  }
  // Start just after the edited subject so different edits see different neighbours.
  auto start = std::upper_bound(subjects.begin(), subjects.end(), edit.fact.subject) - subjects.begin();
  std::vector<NeighborPrompt> out;
  for (int i = 0; i < n; ++i) {
    const EntityId s = subjects[static_cast<std::size_t>(start + i) % subjects.size()];
    const Fact f{s, edit.fact.relation, *world.object_of(s, edit.fact.relation)};
    out.push_back({f, render_prompt(world, s, f.relation, 0)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

nlohmann::json fact_json(const Fact& f) { return nlohmann::json::array({f.subject, f.relation, f.object}); }

Fact fact_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("fact must be [s, r, o]");
  return Fact{j[0].get<EntityId>(), j[1].get<RelationId>(), j[2].get<EntityId>()};
}

}  // namespace

std::string vocab_checksum(const World& world) {
  const nlohmann::json layout = {{"control", static_cast<int>(kNumControlTokens)},
                                 {"entities", world.n_entities()},
                                 {"relations", world.n_relations()}};
  return sha256_hex(layout.dump());
}

nlohmann::json world_to_json(const World& world) {
  nlohmann::json entities = nlohmann::json::array();
  for (int e = 0; e < world.n_entities(); ++e) entities.push_back({{"name", "E" + std::to_string(e)}, {"token", world.entity_token(e)}});
  nlohmann::json relations = nlohmann::json::array();
  for (int r = 0; r < world.n_relations(); ++r) relations.push_back({{"name", "R" + std::to_string(r)}, {"token", world.relation_token(r)}});
  nlohmann::json facts = nlohmann::json::array();
  for (const Fact& f : world.facts()) facts.push_back(fact_json(f));
  nlohmann::json chains = nlohmann::json::array();
  for (const Chain& c : world.chains()) {
    chains.push_back({{"first", fact_json(c.first)}, {"second", fact_json(c.second)}, {"held_out", c.held_out}});
  }
  const WorldConfig& cfg = world.config();
  return {{"seed", cfg.seed},
          {"n_entities", cfg.n_entities},
          {"n_relations", cfg.n_relations},
          {"control_tokens", {"BOS", "Q1", "Q1P", "Q2", "A", "ANC"}},
          {"vocab_size", world.vocab_size()},
          {"entities", entities},
          {"relations", relations},
          {"facts", facts},
          {"chains", chains}};
}

World world_from_json(const nlohmann::json& j) {
  WorldConfig cfg;
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.n_entities = j.at("n_entities").get<int>();
  cfg.n_relations = j.at("n_relations").get<int>();
  std::vector<Fact> facts;
  for (const auto& f : j.at("facts")) facts.push_back(fact_from(f));
  std::vector<Chain> chains;
  for (const auto& c : j.at("chains")) {
    chains.push_back(Chain{fact_from(c.at("first")), fact_from(c.at("second")), c.at("held_out").get<bool>()});
  }
  return World::from_parts(cfg, std::move(facts), std::move(chains));
}

void save_world(const World& world, const std::filesystem::path& path) {
  write_file_atomic(path, world_to_json(world).dump(1) + "\n");
}

World load_world(const std::filesystem::path& path) {
  try {
    return world_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("world file " + path.string() + ": " + e.what());
  }
}

nlohmann::json instance_to_json(const MultiHopInstance& inst) {
  nlohmann::json edits = nlohmann::json::array();
  for (const EditRequest& e : inst.edits) {
    edits.push_back({{"s", e.fact.subject}, {"r", e.fact.relation}, {"o", e.fact.object}, {"o_star", e.new_object}});
  }
  nlohmann::json chain = nlohmann::json::array();
  for (const Fact& f : inst.chain) chain.push_back(fact_json(f));
  return {{"edits", edits},
          {"question_tokens", inst.questions},
          {"original_answer", inst.original_answer},
          {"new_answer", inst.new_answer},
          {"chain", chain}};
}

MultiHopInstance instance_from_json(const nlohmann::json& j) {
  MultiHopInstance inst;
  for (const auto& e : j.at("edits")) {
    inst.edits.push_back(EditRequest{Fact{e.at("s").get<EntityId>(), e.at("r").get<RelationId>(), e.at("o").get<EntityId>()},
                                     e.at("o_star").get<EntityId>()});
  }
  inst.questions = j.at("question_tokens").get<std::vector<Tokens>>();
  inst.original_answer = j.at("original_answer").get<EntityId>();
  inst.new_answer = j.at("new_answer").get<EntityId>();
  for (const auto& f : j.at("chain")) inst.chain.push_back(fact_from(f));
  return inst;
}

void export_dataset(const std::vector<MultiHopInstance>& data, const std::filesystem::path& path) {
  std::string out;
  for (const MultiHopInstance& inst : data) out += instance_to_json(inst).dump() + "\n";
  write_file_atomic(path, out);
}

std::vector<MultiHopInstance> import_dataset(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<MultiHopInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DatasetError(line_no, e.what());
    }
  }
  return out;
}

}  // namespace kele
