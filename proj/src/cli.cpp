// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/cli.hpp"

#include <chrono>
#include <ctime>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "kele/evaluator.hpp"
#include "kele/util.hpp"

namespace kele::cli {

RunConfig::RunConfig() { set_seed(seed); }

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  world.seed = s;
  model.seed = s + 1;
  train.seed = s + 2;
  dataset.seed = s + 3;
  editor.seed = s + 4;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json editor_json = editor;
  nlohmann::json train_json = train;
  nlohmann::json model_json = model;
  model_json.erase("vocab_size");
  model_json.erase("vocab_checksum");
  return {{"seed", seed},
          {"world",
           {{"seed", world.seed},
            {"n_entities", world.n_entities},
            {"n_relations", world.n_relations},
            {"n_facts", world.n_facts},
            {"n_chains", world.n_chains},
            {"n_held_out", world.n_held_out}}},
          {"model", model_json},
          {"train", train_json},
          {"editor", editor_json},
          {"dataset",
           {{"n_instances", dataset.n_instances},
            {"edits_per_instance", dataset.edits_per_instance},
            {"seed", dataset.seed}}},
          {"eval", {{"neighbors", eval.neighbors}, {"bin_width", eval.bin_width}, {"cov_samples", eval.cov_samples}}}};
}

std::string RunConfig::checksum() const { return sha256_hex(to_json().dump()); }

// ---------------------------------------------------------------------------
// Config file

namespace {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  is >> v;
  if (!is || !is.eof()) throw UsageError("config: " + key + ": cannot parse \"" + text + "\"");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw UsageError("config: " + key + ": expected a boolean, got \"" + text + "\"");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw UsageError("config: " + key + ": empty list item");
    out.push_back(parse_number<int>(key, item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw UsageError("config: " + key + ": empty list");
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <typename T, typename Get>
Setter number(Get get) {
  return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_number<T>(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"world.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.world.seed; })},
      {"world.n_entities", number<int>([](RunConfig& c) -> auto& { return c.world.n_entities; })},
      {"world.n_relations", number<int>([](RunConfig& c) -> auto& { return c.world.n_relations; })},
      {"world.n_facts", number<int>([](RunConfig& c) -> auto& { return c.world.n_facts; })},
      {"world.n_chains", number<int>([](RunConfig& c) -> auto& { return c.world.n_chains; })},
      {"world.n_held_out", number<int>([](RunConfig& c) -> auto& { return c.world.n_held_out; })},
      {"model.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.model.seed; })},
      {"model.d_model", number<int>([](RunConfig& c) -> auto& { return c.model.d_model; })},
      {"model.d_ffn", number<int>([](RunConfig& c) -> auto& { return c.model.d_ffn; })},
      {"model.n_layers", number<int>([](RunConfig& c) -> auto& { return c.model.n_layers; })},
      {"model.n_heads", number<int>([](RunConfig& c) -> auto& { return c.model.n_heads; })},
      {"model.max_seq", number<int>([](RunConfig& c) -> auto& { return c.model.max_seq; })},
      {"train.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.train.seed; })},
      {"train.learning_rate", number<double>([](RunConfig& c) -> auto& { return c.train.learning_rate; })},
      {"train.batch_size", number<int>([](RunConfig& c) -> auto& { return c.train.batch_size; })},
      {"train.max_steps", number<int>([](RunConfig& c) -> auto& { return c.train.max_steps; })},
      {"train.recall_gate", number<double>([](RunConfig& c) -> auto& { return c.train.recall_gate; })},
      {"train.composition_gate", number<double>([](RunConfig& c) -> auto& { return c.train.composition_gate; })},
      {"train.eval_interval", number<int>([](RunConfig& c) -> auto& { return c.train.eval_interval; })},
      {"train.rms_decay", number<double>([](RunConfig& c) -> auto& { return c.train.rms_decay; })},
      {"train.rms_eps", number<double>([](RunConfig& c) -> auto& { return c.train.rms_eps; })},
      {"train.weight_decay", number<double>([](RunConfig& c) -> auto& { return c.train.weight_decay; })},
      {"train.prefix_probability",
       number<double>([](RunConfig& c) -> auto& { return c.train.prefix_probability; })},
      {"train.max_prefix", number<int>([](RunConfig& c) -> auto& { return c.train.max_prefix; })},
      {"train.subject_ffn_dropout", number<double>([](RunConfig& c) -> auto& { return c.train.subject_ffn_dropout; })},
      {"train.identity_hops",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train.identity_hops = parse_bool(k, v); }},
      {"editor.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.editor.seed; })},
      {"editor.layer", number<int>([](RunConfig& c) -> auto& { return c.editor.layer; })},
      {"editor.k", number<int>([](RunConfig& c) -> auto& { return c.editor.margin_rank; })},
      {"editor.lambda", number<double>([](RunConfig& c) -> auto& { return c.editor.anchor_weight; })},
      {"editor.n_prefixes", number<int>([](RunConfig& c) -> auto& { return c.editor.n_prefixes; })},
      {"editor.prefix_lengths",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.editor.prefix_lengths = parse_int_list(k, v); }},
      {"editor.steps", number<int>([](RunConfig& c) -> auto& { return c.editor.steps; })},
      {"editor.step_size", number<double>([](RunConfig& c) -> auto& { return c.editor.step_size; })},
      {"editor.clip_norm", number<double>([](RunConfig& c) -> auto& { return c.editor.clip_norm; })},
      {"editor.ridge_scale", number<double>([](RunConfig& c) -> auto& { return c.editor.ridge_scale; })},
      {"editor.mode",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.editor.mode = edit_mode_from_string(v);
         } catch (const std::invalid_argument& e) {
           throw UsageError("config: " + k + ": " + e.what());
         }
       }},
      {"editor.margin_rule",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "exclude_target") {
           c.editor.margin_rule = MarginRule::kExcludeTarget;
         } else if (v == "literal") {
           c.editor.margin_rule = MarginRule::kLiteral;
         } else {
           throw UsageError("config: " + k + ": expected exclude_target or literal");
         }
       }},
      {"dataset.seed", number<std::uint64_t>([](RunConfig& c) -> auto& { return c.dataset.seed; })},
      {"dataset.n_instances", number<int>([](RunConfig& c) -> auto& { return c.dataset.n_instances; })},
      {"dataset.edits_per_instance",
       number<int>([](RunConfig& c) -> auto& { return c.dataset.edits_per_instance; })},
      {"eval.neighbors", number<int>([](RunConfig& c) -> auto& { return c.eval.neighbors; })},
      {"eval.bin_width", number<double>([](RunConfig& c) -> auto& { return c.eval.bin_width; })},
      {"eval.cov_samples", number<int>([](RunConfig& c) -> auto& { return c.eval.cov_samples; })},
  };
  return table;
}

}  // namespace

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream is(read_file(path));
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw UsageError("config " + path.string() + ": " + e.message() + " at line " + std::to_string(e.line()));
  }
  // The global seed goes first so explicit module seeds can override it.
  if (const auto run = tree.get_child_optional("run")) {
    for (const auto& [key, node] : *run) {
      if (key != "seed") throw UsageError("config: unknown key run." + key);
      cfg.set_seed(parse_number<std::uint64_t>("run.seed", node.data()));
    }
  }
  for (const auto& [section, body] : tree) {
    if (section == "run") continue;
    if (body.empty()) throw UsageError("config: key \"" + section + "\" outside a section");
    for (const auto& [key, node] : body) {
      const std::string full = section + "." + key;
      const auto it = setters().find(full);
      if (it == setters().end()) throw UsageError("config: unknown key " + full);
      it->second(cfg, full, node.data());
    }
  }
}

// ---------------------------------------------------------------------------
// Commands

namespace {

class MismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OptimizationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string report;
};

void add_globals(CLI::App* cmd, Globals& g) {
  cmd->add_option("--config", g.config, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", g.seed, "Global seed; derives every module seed");
  cmd->add_option("--out", g.out, "Primary output path");
  cmd->add_option("--report", g.report, "Report JSON path (default: stdout)");
}

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg;
  if (!g.config.empty()) apply_config_file(cfg, g.config);
  if (g.seed) cfg.set_seed(*g.seed);
  return cfg;
}

class Stopwatch {
 public:
  void lap(const std::string& stage) {
    const auto now = std::chrono::steady_clock::now();
    timings_[stage] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  const nlohmann::json& timings() const { return timings_; }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  nlohmann::json timings_ = nlohmann::json::object();
};

void stage(const std::string& line) { std::cerr << "[kele] " << line << std::endl; }

nlohmann::json stamp(nlohmann::json j, const RunConfig& cfg) {
  j["tool_version"] = std::string(kToolVersion);
  j["config_checksum"] = cfg.checksum();
  return j;
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  const std::string text = j.dump(2) + "\n";
  if (path.empty()) {
    std::cout << text;
  } else {
    write_file_atomic(path, text);
  }
}

nlohmann::json artifact(const std::filesystem::path& path) {
  return {{"path", path.string()}, {"sha256", sha256_hex(read_file(path))}};
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const std::filesystem::path& primary, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::filesystem::path>& inputs,
                    const std::vector<std::filesystem::path>& outputs, const Stopwatch& watch) {
  nlohmann::json in = nlohmann::json::array();
  for (const auto& p : inputs) in.push_back(artifact(p));
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : outputs) out.push_back(artifact(p));
  nlohmann::json m = stamp({{"command", command},
                            {"config", cfg.to_json()},
                            {"inputs", in},
                            {"outputs", out},
                            {"timings_seconds", watch.timings()},
                            {"timestamp", utc_timestamp()}},
                           cfg);
  write_file_atomic(primary.string() + ".manifest.json", m.dump(2) + "\n");
}

World load_world_file(const std::string& path) {
  try {
    return load_world(path);
  } catch (const std::invalid_argument& e) {
    throw IoError(path + ": " + e.what());
  }
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("missing required option " + flag);
}

void check_model_world(const Model& model, const World& world) {
  if (model.config.vocab_size != world.vocab_size()) {
    throw MismatchError("checkpoint vocabulary " + std::to_string(model.config.vocab_size) +
                        " does not match world vocabulary " + std::to_string(world.vocab_size()));
  }
  if (!model.config.vocab_checksum.empty() && model.config.vocab_checksum != vocab_checksum(world)) {
    throw MismatchError("checkpoint vocab checksum " + model.config.vocab_checksum + " does not match world " +
                        vocab_checksum(world));
  }
}

void check_dataset_world(const std::vector<MultiHopInstance>& data, const World& world) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const EditRequest& e : data[i].edits) {
      const auto o = world.object_of(e.fact.subject, e.fact.relation);
      if (!o || *o != e.fact.object || e.new_object < 0 || e.new_object >= world.n_entities()) {
        throw MismatchError("dataset instance " + std::to_string(i) + " edits a fact not in the world");
      }
    }
    for (const Tokens& q : data[i].questions) {
      for (TokenId t : q) {
        if (t < 0 || t >= world.vocab_size()) {
          throw MismatchError("dataset instance " + std::to_string(i) + " has a token outside the world vocabulary");
        }
      }
    }
  }
}

std::vector<int> parse_k_list(const std::string& text) {
  std::vector<int> ks = parse_int_list("--sweep-k", text);
  for (int k : ks) {
    if (k < 0) throw UsageError("--sweep-k: values must be >= 0");
  }
  return ks;
}

CovarianceEstimate covariance_for(const Model& base, const World& world, const RunConfig& cfg,
                                  const std::string& cache_dir) {
  if (cache_dir.empty()) {
    return estimate_covariance(base, cfg.editor.layer, world, cfg.eval.cov_samples, std::nullopt, cfg.editor.seed,
                               cfg.editor.ridge_scale);
  }
  return cached_covariance(cache_dir, base, cfg.editor.layer, world, cfg.eval.cov_samples, cfg.editor.seed,
                           cfg.editor.ridge_scale);
}

/// Applies every edit of the dataset in order; returns one record per edit.
nlohmann::json apply_all(Model& model, const World& world, const std::vector<MultiHopInstance>& data,
                         const CovarianceEstimate& cov, const EditorConfig& editor) {
  nlohmann::json records = nlohmann::json::array();
  int edit_id = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (const EditRequest& e : data[i].edits) {
      EditSolution sol;
      try {
        sol = apply_edit(model, world, e, cov, editor);
      } catch (const EditError& err) {
        throw OptimizationFailure("edit " + std::to_string(edit_id) + ": " + err.what());
      } catch (const NumericError& err) {
        throw OptimizationFailure("edit " + std::to_string(edit_id) + ": " + err.what());
      }
      nlohmann::json r = solution_to_json(sol);
      r["edit_id"] = edit_id;
      r["instance_id"] = i;
      r["request"] = {{"s", e.fact.subject}, {"r", e.fact.relation}, {"o", e.fact.object}, {"o_star", e.new_object}};
      records.push_back(std::move(r));
      ++edit_id;
    }
  }
  return records;
}

// gen-world ------------------------------------------------------------------

struct GenWorldArgs {
  Globals g;
  std::string dataset;
  std::optional<int> n_instances;
  std::optional<int> edits_per_instance;
};

int cmd_gen_world(const GenWorldArgs& a) {
  require(a.g.out, "--out");
  RunConfig cfg = resolve_config(a.g);
  if (a.n_instances) cfg.dataset.n_instances = *a.n_instances;
  if (a.edits_per_instance) cfg.dataset.edits_per_instance = *a.edits_per_instance;
  Stopwatch watch;
  const World world = generate_world(cfg.world);
  write_file_atomic(a.g.out, stamp(world_to_json(world), cfg).dump() + "\n");
  watch.lap("generate");
  std::vector<std::filesystem::path> outputs{a.g.out};
  nlohmann::json j = {{"command", "gen-world"},
                      {"entities", world.n_entities()},
                      {"relations", world.n_relations()},
                      {"facts", world.facts().size()},
                      {"chains", world.chains().size()},
                      {"held_out_chains", world.held_out_chains().size()},
                      {"vocab_size", world.vocab_size()},
                      {"vocab_checksum", vocab_checksum(world)}};
  if (!a.dataset.empty()) {
    const auto data =
        make_edit_dataset(world, cfg.dataset.n_instances, cfg.dataset.seed, cfg.dataset.edits_per_instance);
    export_dataset(data, a.dataset);
    outputs.emplace_back(a.dataset);
    j["instances"] = data.size();
    watch.lap("dataset");
  }
  emit_json(stamp(j, cfg), a.g.report);
  if (!a.g.report.empty()) outputs.emplace_back(a.g.report);
  write_manifest(a.g.out, "gen-world", cfg, {}, outputs, watch);
  return kOk;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  Globals g;
  std::string world;
  std::optional<int> max_steps;
  bool force = false;
};

int cmd_train(const TrainArgs& a) {
  require(a.g.out, "--out");
  require(a.world, "--world");
  RunConfig cfg = resolve_config(a.g);
  if (a.max_steps) cfg.train.max_steps = *a.max_steps;
  Stopwatch watch;
  const World world = load_world_file(a.world);
  ModelConfig mc = cfg.model;
  mc.vocab_size = world.vocab_size();
  mc.vocab_checksum = vocab_checksum(world);
  Model model = Model::init(mc);
  watch.lap("load");
  stage("training " + std::to_string(world.facts().size()) + " facts, " +
        std::to_string(world.training_chains().size()) + " training chains");
  const TrainReport rep = train(model, world, cfg.train, [](int step, double loss, double recall, double comp) {
    std::ostringstream os;
    os << "step " << step << " loss " << loss << " recall " << recall << " composition " << comp;
    stage(os.str());
  });
  watch.lap("train");
  const bool write = rep.pass || a.force;
  if (write) save_model(model, a.g.out);
  nlohmann::json report = rep;
  nlohmann::json j = stamp({{"command", "train"},
                            {"report", report},
                            {"checkpoint_written", write},
                            {"model_checksum", model.checksum()}},
                           cfg);
  emit_json(j, a.g.report);
  if (write) {
    std::vector<std::filesystem::path> outputs{a.g.out};
    if (!a.g.report.empty()) outputs.emplace_back(a.g.report);
    write_manifest(a.g.out, "train", cfg, {a.world}, outputs, watch);
  }
  if (!rep.pass) {
    stage(std::string("gate failure: recall ") + std::to_string(rep.recall_accuracy) + ", composition " +
          std::to_string(rep.composition_accuracy) + (a.force ? " (checkpoint forced)" : " (no checkpoint written)"));
    return a.force ? kOk : kGateFailure;
  }
  return kOk;
}

// edit -----------------------------------------------------------------------

struct EditArgs {
  Globals g;
  std::string model;
  std::string world;
  std::string edits;
  std::string cov_cache;
  std::optional<std::string> mode;
  std::optional<int> k;
  std::optional<double> lambda;
  std::optional<int> layer;
};

void apply_editor_flags(RunConfig& cfg, const EditArgs& a) {
  if (a.mode) {
    try {
      cfg.editor.mode = edit_mode_from_string(*a.mode);
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--mode: ") + e.what());
    }
  }
  if (a.k) cfg.editor.margin_rank = *a.k;
  if (a.lambda) cfg.editor.anchor_weight = *a.lambda;
  if (a.layer) cfg.editor.layer = *a.layer;
  try {
    cfg.editor.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

int cmd_edit(const EditArgs& a) {
  require(a.g.out, "--out");
  require(a.model, "--model");
  require(a.world, "--world");
  require(a.edits, "--edits");
  RunConfig cfg = resolve_config(a.g);
  apply_editor_flags(cfg, a);
  Stopwatch watch;
  const World world = load_world_file(a.world);
  Model model = load_model(a.model);
  const auto data = import_dataset(a.edits);
  check_model_world(model, world);
  check_dataset_world(data, world);
  if (cfg.editor.layer >= model.config.n_layers) throw UsageError("--layer outside the model");
  watch.lap("load");
  const std::string base_checksum = model.checksum();
  const CovarianceEstimate cov = covariance_for(model, world, cfg, a.cov_cache);
  watch.lap("covariance");
  stage("applying edits from " + std::to_string(data.size()) + " instances (" + to_string(cfg.editor.mode) + ")");
  nlohmann::json solutions = apply_all(model, world, data, cov, cfg.editor);
  watch.lap("edit");
  save_model(model, a.g.out);
  nlohmann::json editor_json = cfg.editor;
  const nlohmann::json j = stamp({{"command", "edit"},
                                  {"editor", editor_json},
                                  {"base_checksum", base_checksum},
                                  {"edited_checksum", model.checksum()},
                                  {"covariance", {{"n_samples", cov.n_samples}, {"n_keys", cov.n_keys}, {"ridge", cov.ridge}}},
                                  {"solutions", solutions}},
                                 cfg);
  const std::string report = a.g.report.empty() ? a.g.out + ".solutions.json" : a.g.report;
  emit_json(j, report);
  write_manifest(a.g.out, "edit", cfg, {a.model, a.world, a.edits}, {a.g.out, report}, watch);
  return kOk;
}

// eval -----------------------------------------------------------------------

struct EvalArgs {
  EditArgs e;  // editor flags drive the k-sweep
  std::string compare;
  std::string sweep_k;
};

int cmd_eval(const EvalArgs& a) {
  const Globals& g = a.e.g;
  require(a.e.model, "--model");
  require(a.e.world, "--world");
  require(a.e.edits, "--edits");
  if (!a.sweep_k.empty() && a.compare.empty()) throw UsageError("--sweep-k requires --compare BASE.ckpt");
  RunConfig cfg = resolve_config(g);
  apply_editor_flags(cfg, a.e);
  const std::vector<int> ks = a.sweep_k.empty() ? std::vector<int>{} : parse_k_list(a.sweep_k);
  Stopwatch watch;
  const World world = load_world_file(a.e.world);
  const Model model = load_model(a.e.model);
  const auto data = import_dataset(a.e.edits);
  check_model_world(model, world);
  check_dataset_world(data, world);
  std::optional<Model> base;
  if (!a.compare.empty()) {
    base = load_model(a.compare);
    check_model_world(*base, world);
    if (base->config.n_layers != model.config.n_layers || base->config.d_ffn != model.config.d_ffn) {
      throw MismatchError("--compare checkpoint has a different architecture");
    }
  }
  watch.lap("load");
  const int threads = evaluation_threads();
  const EvalReport rep = evaluate(model, base ? &*base : nullptr, world, data, cfg.eval.neighbors, threads);
  watch.lap("evaluate");

  nlohmann::json j = report_to_json(rep);
  j["command"] = "eval";
  j["model_checksum"] = model.checksum();
  j["dataset_checksum"] = sha256_hex(read_file(a.e.edits));
  std::vector<double> rs_edited;
  for (const EditRecord& e : rep.edits) rs_edited.push_back(e.rs);
  j["retain_distribution"] = {{"edited", histogram_to_json(retain_distribution(rs_edited, cfg.eval.bin_width))}};

  std::ostringstream sweep_csv;
  if (base) {
    std::vector<double> rs_base;
    for (const MultiHopInstance& inst : data) {
      for (const EditRequest& e : inst.edits) rs_base.push_back(retain_score(*base, world, e).score);
    }
    j["base_checksum"] = base->checksum();
    j["retain_distribution"]["base"] = histogram_to_json(retain_distribution(rs_base, cfg.eval.bin_width));
    if (!ks.empty()) {
      const CovarianceEstimate cov = covariance_for(*base, world, cfg, a.e.cov_cache);
      nlohmann::json rows = nlohmann::json::array();
      sweep_csv << "k,multihop_correct,multihop_original,mean_rs,efficacy\n";
      for (int k : ks) {
        stage("k-sweep: k = " + std::to_string(k));
        EditorConfig ec = cfg.editor;
        ec.mode = EditMode::kKele;
        ec.margin_rank = k;
        Model edited = *base;
        apply_all(edited, world, data, cov, ec);
        const EvalReport r = evaluate(edited, &*base, world, data, cfg.eval.neighbors, threads);
        rows.push_back({{"k", k},
                        {"multihop_correct", r.multihop_correct},
                        {"multihop_original", r.multihop_original},
                        {"mean_rs", r.mean_rs},
                        {"efficacy", r.efficacy}});
        sweep_csv << k << ',' << nlohmann::json(r.multihop_correct).dump() << ','
                  << nlohmann::json(r.multihop_original).dump() << ',' << nlohmann::json(r.mean_rs).dump() << ','
                  << nlohmann::json(r.efficacy).dump() << '\n';
      }
      j["k_sweep"] = rows;
      watch.lap("sweep");
    }
  }
  emit_json(stamp(j, cfg), g.report);

  std::vector<std::filesystem::path> outputs;
  if (!g.report.empty()) outputs.emplace_back(g.report);
  if (!g.out.empty()) {
    const std::filesystem::path dir = g.out;
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "bins.csv", bins_csv(rep.bins));
    write_file_atomic(dir / "edits.csv", edits_csv(rep.edits));
    outputs.push_back(dir / "bins.csv");
    outputs.push_back(dir / "edits.csv");
    if (!ks.empty()) {
      write_file_atomic(dir / "sweep.csv", sweep_csv.str());
      outputs.push_back(dir / "sweep.csv");
    }
  }
  std::vector<std::filesystem::path> inputs{a.e.model, a.e.world, a.e.edits};
  if (base) inputs.emplace_back(a.compare);
  if (!outputs.empty()) write_manifest(outputs.front(), "eval", cfg, inputs, outputs, watch);
  return kOk;
}

// analyze --------------------------------------------------------------------

struct AnalyzeArgs {
  Globals g;
  std::string input;
  std::string edges;
  std::optional<double> bin_width;
};

std::vector<double> parse_edges(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_number<double>("--edges", item));
  if (out.size() < 2) throw UsageError("--edges needs at least two values");
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (!(out[i] > out[i - 1])) throw UsageError("--edges must be strictly increasing");
  }
  return out;
}

nlohmann::json bins_json(const BinTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const BinRow& b : t.rows) {
    rows.push_back({{"bin_lo", b.lo},
                    {"bin_hi", b.hi},
                    {"count", b.count},
                    {"acc_correct", b.acc_correct},
                    {"acc_original", b.acc_original}});
  }
  return {{"rows", rows},
          {"overflow",
           {{"count", t.overflow.count},
            {"acc_correct", t.overflow.acc_correct},
            {"acc_original", t.overflow.acc_original}}}};
}

nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

int cmd_analyze(const AnalyzeArgs& a) {
  require(a.input, "INPUT");
  RunConfig cfg = resolve_config(a.g);
  if (a.bin_width) cfg.eval.bin_width = *a.bin_width;
  if (!(cfg.eval.bin_width > 0.0)) throw UsageError("--bin-width must be positive");
  Stopwatch watch;
  nlohmann::json in;
  try {
    in = nlohmann::json::parse(read_file(a.input));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(a.input + ": " + e.what());
  }
  if (!in.contains("instances") || !in.contains("edits")) {
    throw MismatchError(a.input + " is not an evaluation report");
  }
  std::vector<double> rs_d, correct, original;
  for (const auto& i : in.at("instances")) {
    rs_d.push_back(i.at("rs").get<double>());
    correct.push_back(i.at("acc_correct").get<double>());
    original.push_back(i.at("acc_original").get<double>());
  }
  std::vector<double> rs_e, efficacy, recall;
  for (const auto& e : in.at("edits")) {
    rs_e.push_back(e.at("rs").get<double>());
    efficacy.push_back(e.at("efficacy").get<bool>() ? 1.0 : 0.0);
    recall.push_back(e.at("post_edit_rank_o").get<int>() == 1 ? 1.0 : 0.0);
  }
  if (rs_d.empty()) throw MismatchError(a.input + " has no instances");

  auto edges_for = [&](const std::vector<double>& scores) {
    if (!a.edges.empty()) return parse_edges(a.edges);
    std::vector<double> e = quantile_edges(scores);
    if (e.size() < 2) e = {scores.front(), std::nextafter(scores.front(), std::numeric_limits<double>::infinity())};
    return e;
  };
  const std::vector<double> inst_edges = edges_for(rs_d);
  const std::vector<double> edit_edges = edges_for(rs_e);
  const BinTable by_instance = bin_scores(rs_d, correct, original, inst_edges);
  // Per edit: "correct" is efficacy, "original" is single-hop recall of o.
  const BinTable by_edit = bin_scores(rs_e, efficacy, recall, edit_edges);
  const double rho_original = rs_d.size() >= 2 ? spearman(rs_d, original) : std::nan("");
  const double rho_correct = rs_d.size() >= 2 ? spearman(rs_d, correct) : std::nan("");
  watch.lap("analyze");

  const nlohmann::json j = stamp({{"command", "analyze"},
                                  {"input_sha256", sha256_hex(read_file(a.input))},
                                  {"n_instances", rs_d.size()},
                                  {"n_edits", rs_e.size()},
                                  {"spearman_rs_original", finite_or_null(rho_original)},
                                  {"spearman_rs_correct", finite_or_null(rho_correct)},
                                  {"instance_bins", bins_json(by_instance)},
                                  {"edit_bins", bins_json(by_edit)},
                                  {"retain_distribution", histogram_to_json(retain_distribution(rs_e, cfg.eval.bin_width))}},
                                 cfg);
  emit_json(j, a.g.report);
  std::vector<std::filesystem::path> outputs;
  if (!a.g.report.empty()) outputs.emplace_back(a.g.report);
  if (!a.g.out.empty()) {
    const std::filesystem::path dir = a.g.out;
    std::filesystem::create_directories(dir);
    write_file_atomic(dir / "instance_bins.csv", bins_csv(by_instance));
    write_file_atomic(dir / "edit_bins.csv", bins_csv(by_edit));
    outputs.push_back(dir / "instance_bins.csv");
    outputs.push_back(dir / "edit_bins.csv");
  }
  if (!outputs.empty()) write_manifest(outputs.front(), "analyze", cfg, {a.input}, outputs, watch);
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const std::string& s : args) argv.push_back(s.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Knowledge editing with residual-knowledge erasure on a toy transformer", "kele"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  GenWorldArgs gw;
  CLI::App* c_gen = app.add_subcommand("gen-world", "Generate a synthetic world (and optionally an edit dataset)");
  add_globals(c_gen, gw.g);
  c_gen->add_option("--dataset", gw.dataset, "Also write an edit dataset (JSONL)");
  c_gen->add_option("--n-instances", gw.n_instances, "Dataset instance count");
  c_gen->add_option("--edits-per-instance", gw.edits_per_instance, "1 or 2");

  TrainArgs tr;
  CLI::App* c_train = app.add_subcommand("train", "Pretrain the toy model on a world");
  add_globals(c_train, tr.g);
  c_train->add_option("--world", tr.world, "World JSON")->check(CLI::ExistingFile);
  c_train->add_option("--max-steps", tr.max_steps, "Training step budget");
  c_train->add_flag("--force", tr.force, "Write the checkpoint even when gates fail");

  auto add_editor = [](CLI::App* cmd, EditArgs& e) {
    add_globals(cmd, e.g);
    cmd->add_option("--model", e.model, "Checkpoint");
    cmd->add_option("--world", e.world, "World JSON");
    cmd->add_option("--edits", e.edits, "Edit dataset (JSONL)");
    cmd->add_option("--mode", e.mode, "kele or rome");
    cmd->add_option("--k", e.k, "Erasure margin rank (0 disables erasure)");
    cmd->add_option("--lambda", e.lambda, "Anchor KL weight");
    cmd->add_option("--layer", e.layer, "Edited layer");
    cmd->add_option("--cov-cache", e.cov_cache, "Covariance cache directory");
  };
  EditArgs ed;
  CLI::App* c_edit = app.add_subcommand("edit", "Apply a dataset's edits sequentially");
  add_editor(c_edit, ed);

  EvalArgs ev;
  CLI::App* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on an edit dataset");
  add_editor(c_eval, ev.e);
  c_eval->add_option("--compare", ev.compare, "Unedited base checkpoint");
  c_eval->add_option("--sweep-k", ev.sweep_k, "Comma-separated k values edited from the base");

  AnalyzeArgs an;
  CLI::App* c_an = app.add_subcommand("analyze", "Correlation and binning analyses of an eval report");
  add_globals(c_an, an.g);
  c_an->add_option("input", an.input, "Eval report JSON")->required();
  c_an->add_option("--edges", an.edges, "Comma-separated bin edges");
  c_an->add_option("--bin-width", an.bin_width, "Histogram bin width");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen_world(gw);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_edit->parsed()) return cmd_edit(ed);
    if (c_eval->parsed()) return cmd_eval(ev);
    if (c_an->parsed()) return cmd_analyze(an);
  } catch (const UsageError& e) {
    std::cerr << "kele: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const MismatchError& e) {
    std::cerr << "kele: artifact mismatch: " << e.what() << "\n";
    return kArtifactMismatch;
  } catch (const OptimizationFailure& e) {
    std::cerr << "kele: optimization failure: " << e.what() << "\n";
    return kOptimizationFailure;
  } catch (const IoError& e) {
    std::cerr << "kele: I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const CheckpointError& e) {
    std::cerr << "kele: I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const DatasetError& e) {
    std::cerr << "kele: I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "kele: I/O error: malformed JSON: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "kele: I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "kele: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace kele::cli
