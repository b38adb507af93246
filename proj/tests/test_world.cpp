// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "kele/util.hpp"

using namespace kele;

TEST_CASE("default world") {
  const World w = generate_world(WorldConfig{});
  CHECK(w.facts().size() == 400);
  CHECK(w.chains().size() == 150);
  CHECK(w.training_chains().size() == 100);
  CHECK(w.held_out_chains().size() == 50);
  CHECK(w.vocab_size() == kNumControlTokens + 256 + 12);

  SUBCASE("functional relations and coverage") {
    std::set<std::pair<int, int>> keys;
    std::set<int> seen;
    for (const Fact& f : w.facts()) {
      CHECK(keys.insert({f.subject, f.relation}).second);
      seen.insert(f.subject);
      seen.insert(f.object);
    }
    CHECK(static_cast<int>(seen.size()) == w.n_entities());
  }
  SUBCASE("chain closure audit") {
    for (const Chain& c : w.chains()) {
      REQUIRE(c.first.object == c.second.subject);
      CHECK(w.object_of(c.first.subject, c.first.relation) == c.first.object);
      CHECK(w.object_of(c.second.subject, c.second.relation) == c.second.object);
      const auto cands = edit_candidates(w, c);
      CHECK(!cands.empty());
      for (EntityId b : cands) {
        const auto a = w.object_of(b, c.second.relation);
        REQUIRE(a.has_value());
        CHECK(*a != c.second.object);
      }
    }
  }
  SUBCASE("token map is injective") {
    std::set<TokenId> toks;
    for (int e = 0; e < w.n_entities(); ++e) {
      CHECK(toks.insert(w.entity_token(e)).second);
      CHECK(w.entity_of_token(w.entity_token(e)) == e);
    }
    for (int r = 0; r < w.n_relations(); ++r) CHECK(toks.insert(w.relation_token(r)).second);
    CHECK(*toks.begin() == kNumControlTokens);
    CHECK(*toks.rbegin() == w.vocab_size() - 1);
    CHECK(!w.entity_of_token(kAnswer).has_value());
    CHECK_THROWS_AS(w.entity_token(256), std::out_of_range);
  }
  SUBCASE("prompt lengths fit the context") {
    for (const Fact& f : w.facts()) {
      CHECK(render_prompt(w, f.subject, f.relation, 0).size() <= 15);
      CHECK(render_prompt(w, f.subject, f.relation, 1).size() <= 15);
    }
  }
}

TEST_CASE("generation is deterministic and seed dependent") {
  const WorldConfig c = kele::testing::small_world_config();
  CHECK(world_to_json(generate_world(c)) == world_to_json(generate_world(c)));
  WorldConfig d = c;
  d.seed = c.seed + 1;
  CHECK(world_to_json(generate_world(d)) != world_to_json(generate_world(c)));
}

TEST_CASE("no chains") {
  WorldConfig c = kele::testing::small_world_config();
  c.n_chains = 0;
  c.n_held_out = 0;
  const World w = generate_world(c);
  CHECK(w.chains().empty());
  CHECK(w.facts().size() == 40);
}

TEST_CASE("infeasible counts") {
  WorldConfig c = kele::testing::small_world_config();
  c.n_facts = 10;
  CHECK_THROWS_AS(generate_world(c), std::invalid_argument);
  c = kele::testing::small_world_config();
  c.n_facts = 24 * 3 + 1;
  CHECK_THROWS_AS(generate_world(c), std::invalid_argument);
  c = kele::testing::small_world_config();
  c.n_held_out = 30;
  CHECK_THROWS_AS(generate_world(c), std::invalid_argument);
  c = kele::testing::small_world_config();
  c.n_chains = 100000;
  CHECK_THROWS_WITH_AS(generate_world(c), doctest::Contains("infeasible"), std::invalid_argument);
}

TEST_CASE("rendering") {
  const World& w = kele::testing::small_world();
  const Fact f = w.facts()[3];
  const TokenId s = w.entity_token(f.subject), r = w.relation_token(f.relation);
  CHECK(render_prompt(w, f.subject, f.relation, 0) == Tokens{kQuery, s, r, kAnswer});
  CHECK(render_prompt(w, f.subject, f.relation, 1) == Tokens{kQueryParaphrase, r, s, kAnswer});
  CHECK(render_prompt(w, f.subject, f.relation, 0)[static_cast<std::size_t>(subject_position(0))] == s);
  CHECK(render_prompt(w, f.subject, f.relation, 1)[static_cast<std::size_t>(subject_position(1))] == s);
  CHECK_THROWS_AS(render_prompt(w, f.subject, f.relation, 2), std::invalid_argument);
  CHECK_THROWS_AS(render_prompt(w, 99, f.relation, 0), std::out_of_range);
  CHECK(render_anchor(w, f.subject) == Tokens{kAnchor, s});
  CHECK(render_identity_hop(w, f.subject, f.relation, true) == Tokens{kQueryTwoHop, s, kSelf, r, kAnswer});
  CHECK(render_identity_hop(w, f.subject, f.relation, false) == Tokens{kQueryTwoHop, s, r, kSelf, kAnswer});

  const Chain& c = w.chains().front();
  CHECK(render_multihop(w, c) == Tokens{kQueryTwoHop, w.entity_token(c.first.subject), w.relation_token(c.first.relation),
                                        w.relation_token(c.second.relation), kAnswer});
  Chain broken = c;
  broken.second.subject = c.first.object + 1;
  CHECK_THROWS_AS(render_multihop(w, broken), std::invalid_argument);
}

TEST_CASE("edit datasets") {
  const World w = generate_world(WorldConfig{});
  const auto data = make_edit_dataset(w, 100, 3);
  REQUIRE(data.size() == 100);
  std::set<std::pair<int, int>> edited;
  for (const MultiHopInstance& d : data) {
    REQUIRE(d.edits.size() == 1);
    const EditRequest& e = d.edits[0];
    CHECK(e.new_object != e.fact.object);
    CHECK(w.object_of(e.fact.subject, e.fact.relation) == e.fact.object);
    CHECK(edited.insert({e.fact.subject, e.fact.relation}).second);
    CHECK(d.chain[0].object == d.chain[1].subject);
    CHECK(d.original_answer == d.chain[1].object);
    CHECK(d.new_answer == w.object_of(e.new_object, d.chain[1].relation));
    CHECK(d.new_answer != d.original_answer);
  }
  CHECK(make_edit_dataset(w, 100, 3) == data);
  CHECK(make_edit_dataset(w, 100, 4) != data);
  CHECK_THROWS_WITH_AS(make_edit_dataset(w, 151, 3), doctest::Contains("insufficient"), std::invalid_argument);

  SUBCASE("two-edit instances walk the edited table") {
    for (const MultiHopInstance& d : make_edit_dataset(w, 50, 5, 2)) {
      REQUIRE(d.edits.size() == 2);
      const EntityId bridge = d.edits[0].new_object;
      CHECK(d.edits[1].fact.subject == bridge);
      CHECK(d.edits[1].fact.relation == d.chain[1].relation);
      CHECK(d.new_answer == d.edits[1].new_object);
      CHECK(d.new_answer != d.original_answer);
    }
  }
}

TEST_CASE("neighborhood prompts") {
  const World w = generate_world(WorldConfig{});
  const EditRequest e{w.facts()[0], 1};
  const auto n = neighborhood_prompts(w, e, 5);
  REQUIRE(n.size() == 5);
  for (const NeighborPrompt& p : n) {
    CHECK(p.fact.subject != e.fact.subject);
    CHECK(p.fact.relation == e.fact.relation);
    CHECK(w.object_of(p.fact.subject, p.fact.relation) == p.fact.object);
    CHECK(p.prompt == render_prompt(w, p.fact.subject, p.fact.relation, 0));
  }
  const auto avail = static_cast<int>(w.subjects_of(e.fact.relation).size()) - 1;
  const std::string msg = std::to_string(avail) + " available";
  CHECK_THROWS_WITH_AS(neighborhood_prompts(w, e, avail + 1), doctest::Contains(msg.c_str()), std::invalid_argument);
}

TEST_CASE("world and dataset files") {
  const auto dir = kele::testing::temp_dir("world");
  const World& w = kele::testing::small_world();
  save_world(w, dir / "w.json");
  CHECK(world_to_json(load_world(dir / "w.json")) == world_to_json(w));
  CHECK(vocab_checksum(load_world(dir / "w.json")) == vocab_checksum(w));

  const auto data = make_edit_dataset(w, 8, 1);
  export_dataset(data, dir / "d.jsonl");
  CHECK(import_dataset(dir / "d.jsonl") == data);

  export_dataset({}, dir / "empty.jsonl");
  CHECK(read_file(dir / "empty.jsonl").empty());
  CHECK(import_dataset(dir / "empty.jsonl").empty());

  {
    std::ofstream f(dir / "hand.jsonl");
    f << R"({"edits":[{"s":1,"r":2,"o":3,"o_star":4}],"question_tokens":[[3,8,20,21,4]],)"
      << R"("original_answer":9,"new_answer":10,"chain":[[1,2,3],[3,0,9]]})" << "\n";
  }
  const auto hand = import_dataset(dir / "hand.jsonl");
  REQUIRE(hand.size() == 1);
  CHECK(hand[0].edits[0] == EditRequest{Fact{1, 2, 3}, 4});
  CHECK(hand[0].questions[0] == Tokens{3, 8, 20, 21, 4});
  CHECK(hand[0].original_answer == 9);
  CHECK(hand[0].new_answer == 10);
  CHECK(hand[0].chain == std::vector<Fact>{{1, 2, 3}, {3, 0, 9}});

  {
    std::ofstream f(dir / "bad.jsonl");
    f << instance_to_json(data[0]).dump() << "\n{\"edits\": oops}\n";
  }
  try {
    import_dataset(dir / "bad.jsonl");
    FAIL("expected error");
  } catch (const DatasetError& e) {
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).starts_with("line 2"));
  }
}
