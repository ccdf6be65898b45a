#pragma once

// Staged detection pipeline driven by a single JSON config. Each stage reads
// the artifacts of earlier stages from the output directory, writes its own,
// and records a manifest with input and output hashes that links to the
// manifest of the stage before it.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mutdet/corpus.hpp"
#include "mutdet/detector.hpp"
#include "mutdet/error.hpp"
#include "mutdet/eval.hpp"
#include "mutdet/hash.hpp"
#include "mutdet/mutation.hpp"
#include "mutdet/pcv.hpp"
#include "mutdet/poison.hpp"
#include "mutdet/rng.hpp"
#include "mutdet/textmodel.hpp"

namespace mutdet {

enum class PipelineMode { ThreeLevel, Style };

NLOHMANN_JSON_SERIALIZE_ENUM(PipelineMode, {{PipelineMode::ThreeLevel, "three_level"},
                                            {PipelineMode::Style, "style"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Optimizer, {{Optimizer::Sgd, "sgd"}, {Optimizer::Adam, "adam"}})

/// Custom backdoor and mutation operator of one detection pipeline.
struct LevelSetup {
  TriggerLevel level = TriggerLevel::Word;
  PoisonConfig custom;
  MutationOp op;
};

/// Defender-side mode: a target model handed over as files.
struct ExternalTarget {
  std::filesystem::path model;
  std::filesystem::path vocab;
};

struct PipelineConfig {
  nlohmann::json resolved;  // user config merged over the defaults
  std::filesystem::path output_dir;

  std::filesystem::path train_path;
  std::optional<std::filesystem::path> validation_path;
  std::size_t max_len = 64;
  std::size_t min_freq = 1;
  std::size_t max_vocab = 5000;
  SplitFractions fractions;
  std::uint64_t split_seed = 0;
  std::size_t target_class = 0;

  std::size_t embed_dim = 32;
  std::vector<std::size_t> hidden{64, 64};
  std::uint64_t init_seed = 0;
  TrainConfig target_training;
  std::optional<ExternalTarget> external_target;
  std::optional<PoisonConfig> attack;

  PipelineMode mode = PipelineMode::ThreeLevel;
  std::vector<LevelSetup> levels;
  TrainConfig retraining;
  std::size_t num_mutants = 100;
  std::uint64_t mutation_seed = 0;
  double mutant_sanity_fraction = 0.5;
  PcvProjection projection = PcvProjection::TargetClass;

  DetectorConfig detector;
  bool joint_detector = true;
  double detector_train_fraction = 0.5;
  std::uint64_t detector_split_seed = 0;
  std::optional<std::filesystem::path> evaluation_inputs;

  /// Hash of the resolved config without the output location, so runs into
  /// different directories share a fingerprint.
  std::string fingerprint() const {
    auto j = resolved;
    j.erase("output_dir");
    return config_fingerprint(j);
  }

  std::string mode_name() const { return nlohmann::json(mode).get<std::string>(); }
};

inline nlohmann::json default_pipeline_config() {
  return R"({
    "output_dir": "out",
    "corpus": {"train": null, "validation": null, "max_len": 64, "min_freq": 1, "max_vocab": 5000},
    "split": {"fractions": [0.55, 0.15, 0.30, 0.0], "seed": 1},
    "target_class": null,
    "model": {"embed_dim": 32, "hidden": [64, 64], "init_seed": 3},
    "target_training": {"epochs": 10, "batch_size": 32, "learning_rate": 0.001, "optimizer": "adam", "seed": 5},
    "target_model": null,
    "attack": null,
    "mode": "three_level",
    "custom": {
      "char": {"trigger": {"level": "char", "num_words": 3}, "poison_rate": 0.1, "seed": 21},
      "word": {"trigger": {"level": "word", "trigger_words": ["food", "friends", "weekend"],
                           "carrier_sentence": "I have tried this place and their food with my friends last weekend."},
               "poison_rate": 0.1, "seed": 22},
      "sentence": {"trigger": {"level": "sentence",
                               "sentence_pool": ["You will not believe what happened next.",
                                                 "Everyone was talking about what happened."],
                               "draw_seed": 7},
                   "poison_rate": 0.1, "seed": 23},
      "style": {"trigger": null, "poison_rate": 0.2, "seed": 24}
    },
    "retraining": {"epochs": 5, "batch_size": 32, "learning_rate": 0.001, "optimizer": "adam", "seed": 6},
    "mutation": {
      "n": 100, "seed": 99, "neb_head_policy": "zero_head_columns", "sanity_min_fraction": 0.5,
      "char": {"operator": "NS", "rate": 0.03},
      "word": {"operator": "NAI", "rate": 0.05},
      "sentence": {"operator": "NEB", "rate": 0.05},
      "style": {"operator": "NEB", "rate": 0.03}
    },
    "pcv": {"projection": "target_class"},
    "detector": {"hidden": [64, 16], "epochs": 200, "learning_rate": 0.001, "seed": 4, "threshold": 0.5,
                 "balance_classes": true, "joint": true, "train_fraction": 0.5, "split_seed": 8},
    "evaluation": {"inputs": null}
  })"_json;
}

using SeedOverrides = std::vector<std::pair<std::string, std::uint64_t>>;

namespace detail {

/// Recursive object merge; "trigger" objects are replaced wholesale so a
/// trigger of another level never inherits stray default fields.
inline void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where) {
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[key];
    if (slot.is_object() && value.is_object() && key != "trigger") {
      merge_config(slot, value, path);
    } else {
      slot = value;
    }
  }
}

/// Enum from a JSON string, rejecting names the mapping does not know.
template <typename E>
E parse_enum(const nlohmann::json& j, const std::string& what) {
  const auto e = j.get<E>();
  if (nlohmann::json(e) != j) throw ConfigError("invalid " + what + ": " + j.dump());
  return e;
}

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() ? base / path : path;
}

inline TrainConfig parse_train(const nlohmann::json& j, const std::string& what) {
  TrainConfig t;
  t.epochs = j.at("epochs").get<std::size_t>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.learning_rate = j.at("learning_rate").get<double>();
  t.optimizer = parse_enum<Optimizer>(j.at("optimizer"), what + " optimizer");
  t.train_seed = j.at("seed").get<std::uint64_t>();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(what + ": " + e.what());
  }
  return t;
}

inline PoisonConfig parse_poison(const nlohmann::json& j, std::size_t target_class,
                                 const std::filesystem::path& base, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be an object");
  if (!j.contains("trigger") || j["trigger"].is_null()) throw ConfigError(what + ": trigger is required");
  PoisonConfig p;
  p.trigger = trigger_from_json(j["trigger"], base);
  p.target_class = target_class;
  p.poison_rate = j.value("poison_rate", 0.1);
  if (!j.contains("seed")) throw ConfigError(what + ": seed is required");
  p.poison_seed = j.at("seed").get<std::uint64_t>();
  if (!(p.poison_rate > 0.0 && p.poison_rate < 1.0)) throw ConfigError(what + ": poison_rate must be in (0, 1)");
  return p;
}

inline void set_seed(nlohmann::json& j, const std::string& name, std::uint64_t value) {
  static const std::map<std::string, std::vector<std::string>> kTargets{
      {"split", {"/split/seed"}},
      {"init", {"/model/init_seed"}},
      {"target", {"/target_training/seed"}},
      {"attack", {"/attack/seed"}},
      {"poison", {"/custom/char/seed", "/custom/word/seed", "/custom/sentence/seed", "/custom/style/seed"}},
      {"retrain", {"/retraining/seed"}},
      {"mutate", {"/mutation/seed"}},
      {"detector", {"/detector/seed"}},
      {"detector_split", {"/detector/split_seed"}},
  };
  const auto it = kTargets.find(name);
  if (it == kTargets.end()) throw ConfigError("unknown stage seed '" + name + "'");
  for (const auto& ptr : it->second) {
    const nlohmann::json::json_pointer p(ptr);
    if (name == "attack" && j["attack"].is_null()) throw ConfigError("stage seed 'attack' given without an attack");
    j[p] = value;
  }
}

}  // namespace detail

/// Validates a user config merged over the defaults. Relative paths resolve
/// against `base_dir`.
inline PipelineConfig parse_config(const nlohmann::json& user, const std::filesystem::path& base_dir,
                                   const SeedOverrides& seeds = {}) {
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig c;
  try {
    auto j = default_pipeline_config();
    detail::merge_config(j, user, "");
    for (const auto& [name, value] : seeds) detail::set_seed(j, name, value);
    c.resolved = j;

    c.output_dir = detail::resolve_path(base_dir, j.at("output_dir").get<std::string>());

    const auto& corpus = j.at("corpus");
    if (corpus.at("train").is_null()) throw ConfigError("corpus.train is required");
    c.train_path = detail::resolve_path(base_dir, corpus["train"].get<std::string>());
    if (!corpus.at("validation").is_null()) {
      c.validation_path = detail::resolve_path(base_dir, corpus["validation"].get<std::string>());
    }
    c.max_len = corpus.at("max_len").get<std::size_t>();
    c.min_freq = corpus.at("min_freq").get<std::size_t>();
    c.max_vocab = corpus.at("max_vocab").get<std::size_t>();
    if (c.max_len < 1 || c.min_freq < 1 || c.max_vocab < 1) {
      throw ConfigError("corpus: max_len, min_freq and max_vocab must be >= 1");
    }

    const auto f = j.at("split").at("fractions").get<std::vector<double>>();
    if (f.size() != 4) throw ConfigError("split.fractions needs four entries");
    c.fractions = {f[0], f[1], f[2], f[3]};
    double sum = 0.0;
    for (double x : f) {
      if (x < 0.0) throw ConfigError("split.fractions must be non-negative");
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split.fractions must sum to 1");
    if (!c.validation_path && c.fractions.detector_pool == 0.0) {
      // Single corpus file: the target-val slice becomes the detector pool.
      c.fractions.detector_pool = c.fractions.target_val;
      c.fractions.target_val = 0.0;
    }
    if (!c.validation_path && c.fractions.detector_pool == 0.0) {
      throw ConfigError("no detector pool: set corpus.validation or a non-zero detector-pool fraction");
    }
    c.split_seed = j.at("split").at("seed").get<std::uint64_t>();

    if (j.at("target_class").is_null()) throw ConfigError("target_class is required");
    c.target_class = j["target_class"].get<std::size_t>();

    const auto& model = j.at("model");
    c.embed_dim = model.at("embed_dim").get<std::size_t>();
    c.hidden = model.at("hidden").get<std::vector<std::size_t>>();
    c.init_seed = model.at("init_seed").get<std::uint64_t>();
    c.target_training = detail::parse_train(j.at("target_training"), "target_training");
    c.retraining = detail::parse_train(j.at("retraining"), "retraining");

    if (!j.at("target_model").is_null()) {
      const auto& t = j["target_model"];
      c.external_target = ExternalTarget{detail::resolve_path(base_dir, t.at("model").get<std::string>()),
                                         detail::resolve_path(base_dir, t.at("vocab").get<std::string>())};
    }
    if (!j.at("attack").is_null()) {
      c.attack = detail::parse_poison(j["attack"], c.target_class, base_dir, "attack");
    }
    if (c.attack && c.external_target) throw ConfigError("give either an attack or a target_model, not both");
    if (!c.attack && !c.external_target) throw ConfigError("give an attack (simulation) or a target_model");

    c.mode = detail::parse_enum<PipelineMode>(j.at("mode"), "mode");
    std::vector<TriggerLevel> levels;
    if (c.mode == PipelineMode::ThreeLevel) {
      levels = {TriggerLevel::Char, TriggerLevel::Word, TriggerLevel::Sentence};
    } else {
      levels = {TriggerLevel::Style};
    }
    const auto& mutation = j.at("mutation");
    const auto neb = detail::parse_enum<NebHeadPolicy>(mutation.at("neb_head_policy"), "neb_head_policy");
    for (auto level : levels) {
      const std::string name(level_name(level));
      LevelSetup s;
      s.level = level;
      s.custom = detail::parse_poison(j.at("custom").at(name), c.target_class, base_dir, "custom." + name);
      if (s.custom.trigger.level() != level) {
        throw ConfigError("custom." + name + ": trigger level does not match");
      }
      const auto& m = mutation.at(name);
      s.op.kind = detail::parse_enum<MutationKind>(m.at("operator"), "mutation operator");
      s.op.rate = m.at("rate").get<double>();
      s.op.neb_head = neb;
      s.op.validate();
      c.levels.push_back(std::move(s));
    }
    c.num_mutants = mutation.at("n").get<std::size_t>();
    if (c.num_mutants < 1) throw ConfigError("mutation.n must be >= 1");
    c.mutation_seed = mutation.at("seed").get<std::uint64_t>();
    c.mutant_sanity_fraction = mutation.at("sanity_min_fraction").get<double>();
    c.projection = detail::parse_enum<PcvProjection>(j.at("pcv").at("projection"), "pcv.projection");

    const auto& d = j.at("detector");
    c.detector.hidden = d.at("hidden").get<std::vector<std::size_t>>();
    c.detector.epochs = d.at("epochs").get<std::size_t>();
    c.detector.learning_rate = d.at("learning_rate").get<double>();
    c.detector.seed = d.at("seed").get<std::uint64_t>();
    c.detector.threshold = d.at("threshold").get<double>();
    c.detector.balance_classes = d.at("balance_classes").get<bool>();
    c.joint_detector = d.at("joint").get<bool>();
    c.detector_train_fraction = d.at("train_fraction").get<double>();
    c.detector_split_seed = d.at("split_seed").get<std::uint64_t>();
    if (c.detector.epochs < 1 || !(c.detector.learning_rate > 0.0)) {
      throw ConfigError("detector: epochs and learning_rate must be positive");
    }
    if (!(c.detector.threshold > 0.0 && c.detector.threshold < 1.0)) {
      throw ConfigError("detector.threshold must be in (0, 1)");
    }
    if (!(c.detector_train_fraction > 0.0 && c.detector_train_fraction < 1.0)) {
      throw ConfigError("detector.train_fraction must be in (0, 1)");
    }
    if (!j.at("evaluation").at("inputs").is_null()) {
      c.evaluation_inputs = detail::resolve_path(base_dir, j["evaluation"]["inputs"].get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path, const SeedOverrides& seeds = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path(), seeds);
}

// ---------------------------------------------------------------------------
// Stage bookkeeping

inline constexpr std::array<std::string_view, 8> kStageNames{"train", "poison",       "retrain", "mutate",
                                                             "pcv",   "fit_detector", "detect",  "eval"};

/// Inputs and outputs touched by one stage run, as paths relative to the
/// output directory (outputs) or as given (external inputs).
class StageRecord {
 public:
  explicit StageRecord(std::filesystem::path root) : root_(std::move(root)) {}

  std::filesystem::path input(const std::string& rel) {
    inputs_[rel] = root_ / rel;
    return root_ / rel;
  }
  void external_input(const std::string& label, const std::filesystem::path& path) { inputs_[label] = path; }

  std::filesystem::path output(const std::string& rel) {
    const auto p = root_ / rel;
    std::filesystem::create_directories(p.parent_path());
    if (std::find(outputs_.begin(), outputs_.end(), rel) == outputs_.end()) outputs_.push_back(rel);
    return p;
  }

  const std::map<std::string, std::filesystem::path>& inputs() const { return inputs_; }
  const std::vector<std::string>& outputs() const { return outputs_; }

 private:
  std::filesystem::path root_;
  std::map<std::string, std::filesystem::path> inputs_;
  std::vector<std::string> outputs_;
};

class Workspace {
 public:
  explicit Workspace(PipelineConfig config) : config_(std::move(config)) {}

  const PipelineConfig& config() const { return config_; }
  std::filesystem::path path(const std::string& rel) const { return config_.output_dir / rel; }
  std::filesystem::path manifest_path(std::string_view stage) const {
    return path("manifests/" + std::string(stage) + ".json");
  }

  static std::size_t stage_index(std::string_view stage) {
    const auto it = std::find(kStageNames.begin(), kStageNames.end(), stage);
    if (it == kStageNames.end()) throw ConfigError("unknown stage '" + std::string(stage) + "'");
    return static_cast<std::size_t>(it - kStageNames.begin());
  }

  /// Every earlier stage must have a manifest written under the same config,
  /// its outputs must still hash as recorded, and each manifest must point at
  /// the one before it.
  void verify_before(std::string_view stage) const {
    const std::string me(stage);
    const std::string fp = config_.fingerprint();
    std::string previous_hash;
    for (std::size_t i = 0; i < stage_index(stage); ++i) {
      const std::string s(kStageNames[i]);
      const auto mp = manifest_path(s);
      if (!std::filesystem::exists(mp)) {
        throw StageError(me, "missing prerequisite stage '" + s + "': run it first");
      }
      nlohmann::json m;
      try {
        std::ifstream in(mp, std::ios::binary);
        in >> m;
        if (m.at("stage").get<std::string>() != s) throw StageError(me, "manifest of stage '" + s + "' is mislabeled");
        if (m.at("config_fingerprint").get<std::string>() != fp) {
          throw StageError(me, "stage '" + s + "' was run with a different config: rerun it");
        }
        if (i > 0 && m.at("previous_manifest_sha256").get<std::string>() != previous_hash) {
          throw StageError(me, "manifest chain broken at stage '" + s + "': rerun it");
        }
        for (const auto& [rel, sha] : m.at("outputs").items()) {
          const auto p = path(rel);
          if (!std::filesystem::exists(p)) {
            throw StageError(me, "artifact '" + rel + "' of stage '" + s + "' is missing");
          }
          if (sha256_file(p) != sha.get<std::string>()) {
            throw StageError(me, "artifact '" + rel + "' of stage '" + s + "' was modified");
          }
        }
      } catch (const nlohmann::json::exception& e) {
        throw StageError(me, "unreadable manifest of stage '" + s + "': " + e.what());
      }
      previous_hash = sha256_file(mp);
    }
  }

  void seal(std::string_view stage, const StageRecord& record) const {
    nlohmann::json m;
    m["stage"] = std::string(stage);
    m["config_fingerprint"] = config_.fingerprint();
    const std::size_t i = stage_index(stage);
    m["previous_manifest_sha256"] = i == 0 ? std::string() : sha256_file(manifest_path(kStageNames[i - 1]));
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& [label, p] : record.inputs()) inputs[label] = sha256_file(p);
    m["inputs"] = inputs;
    nlohmann::json outputs = nlohmann::json::object();
    for (const auto& rel : record.outputs()) outputs[rel] = sha256_file(path(rel));
    m["outputs"] = outputs;
    const auto mp = manifest_path(stage);
    std::filesystem::create_directories(mp.parent_path());
    std::ofstream out(mp, std::ios::binary);
    if (!out) throw Error("cannot write " + mp.string());
    out << m.dump(2) << '\n';
  }

 private:
  PipelineConfig config_;
};

namespace detail {

/// Runs a stage body with prerequisite checks; any failure is reported with
/// the stage name.
template <typename F>
void run_stage(const Workspace& ws, std::string_view stage, F&& body) {
  try {
    ws.verify_before(stage);
    StageRecord record(ws.config().output_dir);
    body(record);
    ws.seal(stage, record);
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(std::string(stage), e.what());
  }
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ParseError("cannot open " + p.string());
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.filename().string() + ": " + e.what());
  }
}

inline std::vector<LabeledExample> read_examples(const std::filesystem::path& p) {
  return load_jsonl(p).examples;
}

inline void write_mask(const std::filesystem::path& p, const std::vector<bool>& mask) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  for (bool b : mask) out << (b ? '1' : '0') << '\n';
}

inline std::string level_file(const LevelSetup& s, std::string_view dir, std::string_view ext) {
  return std::string(dir) + "/" + std::string(level_name(s.level)) + std::string(ext);
}

/// Level-specific seed so each pipeline draws an independent stream.
inline std::uint64_t level_seed(std::uint64_t master, TriggerLevel level) {
  return derive_seed(master, static_cast<std::uint64_t>(level));
}

inline double accuracy_on(const Model& m, const Vocab& vocab, std::span<const LabeledExample> data, std::size_t L) {
  const auto enc = encode_all(vocab, data, L);
  return accuracy(m, enc);
}

/// Fraction of non-target examples that the trigger sends to the target
/// class; examples the trigger cannot be applied to are left out.
inline double attack_success_rate(const Model& m, const Vocab& vocab, const TriggerSpec& trigger,
                                  std::span<const LabeledExample> data, std::size_t L, std::size_t target) {
  std::size_t hit = 0, total = 0;
  for (const auto& ex : data) {
    if (ex.label == target) continue;
    LabeledExample injected;
    try {
      injected = inject_trigger(trigger, ex);
    } catch (const InjectionError&) {
      continue;
    }
    ++total;
    hit += predict(m, encode(vocab, injected.text, L)) == target;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

struct TargetArtifacts {
  Vocab vocab;
  std::shared_ptr<const Model> model;
};

inline TargetArtifacts load_target(StageRecord& rec) {
  return {Vocab::load(rec.input("vocab.tsv")),
          std::make_shared<const Model>(load_model(rec.input("target/model.bin")))};
}

struct EvalInput {
  LabeledExample example;
  std::optional<bool> is_backdoor;
};

/// JSONL with string "text", optional "origin_id" and optional boolean
/// "is_backdoor".
inline std::vector<EvalInput> read_eval_inputs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open evaluation inputs " + path.string());
  std::vector<EvalInput> out;
  std::string line;
  std::size_t lineno = 0;
  const auto name = path.filename().string();
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(name + ": invalid JSON: " + e.what(), lineno);
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw ParseError(name + ": missing string field \"text\"", lineno);
    }
    EvalInput e;
    e.example.text = j["text"].get<std::string>();
    e.example.origin_id = j.contains("origin_id") ? j["origin_id"].get<std::string>() : name + ":" + std::to_string(lineno);
    if (j.contains("is_backdoor")) {
      if (!j["is_backdoor"].is_boolean()) throw ParseError(name + ": \"is_backdoor\" must be a boolean", lineno);
      e.is_backdoor = j["is_backdoor"].get<bool>();
    }
    out.push_back(std::move(e));
  }
  if (out.empty()) throw ParseError(name + ": no evaluation inputs");
  return out;
}

inline std::vector<Pipeline> load_pipelines(const PipelineConfig& cfg, StageRecord& rec) {
  std::vector<Pipeline> out;
  for (const auto& s : cfg.levels) {
    auto model = std::make_shared<const Model>(load_model(rec.input(level_file(s, "retrain", ".bin"))));
    auto manifest = read_json(rec.input(level_file(s, "mutants", ".json")));
    auto mutants = std::make_shared<const MutantSet<float>>(mutants_from_manifest(manifest, model));
    out.push_back({std::string(level_name(s.level)), model, mutants, {}, {}});
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

/// Splits the corpus, builds or loads the vocabulary, and trains (simulation)
/// or imports (external) the target model.
inline void cmd_train(const Workspace& ws) {
  detail::run_stage(ws, "train", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    rec.external_input("corpus.train", cfg.train_path);
    Corpus corpus = load_jsonl(cfg.train_path);
    std::vector<LabeledExample> validation;
    std::size_t classes = corpus.class_count;
    if (cfg.validation_path) {
      rec.external_input("corpus.validation", *cfg.validation_path);
      auto v = load_jsonl(*cfg.validation_path);
      classes = std::max(classes, v.class_count);
      validation = std::move(v.examples);
    }
    corpus.class_count = classes;
    if (cfg.target_class >= classes) throw ConfigError("target_class outside the corpus label range");
    corpus = split(std::move(corpus), cfg.fractions, cfg.split_seed);

    std::unordered_set<std::string> ids;
    for (const auto& ex : corpus.examples) ids.insert(ex.origin_id);
    for (const auto& ex : validation) {
      if (!ids.insert(ex.origin_id).second) {
        throw ConfigError("origin_id '" + ex.origin_id + "' occurs in both corpus files");
      }
    }
    for (std::size_t s = 0; s < 4; ++s) {
      auto part = corpus.subset(static_cast<Split>(s));
      if (static_cast<Split>(s) == Split::DetectorPool) part.insert(part.end(), validation.begin(), validation.end());
      write_jsonl(rec.output("corpus/" + std::string(kSplitNames[s]) + ".jsonl"), part);
    }
    const auto train_part = corpus.subset(Split::TargetTrain);
    const auto val_part = corpus.subset(Split::TargetVal);
    if (train_part.empty()) throw ConfigError("target-train split is empty");
    if (corpus.subset(Split::RetrainPool).empty()) throw ConfigError("retrain-pool split is empty");

    nlohmann::json log;
    if (cfg.external_target) {
      rec.external_input("target_model.model", cfg.external_target->model);
      rec.external_input("target_model.vocab", cfg.external_target->vocab);
      const auto vocab = Vocab::load(cfg.external_target->vocab);
      const auto model = load_model(cfg.external_target->model);
      if (model.dims.vocab_size != vocab.size()) {
        throw ConfigError("target model embedding rows do not match the vocabulary size");
      }
      if (model.dims.num_classes < classes) throw ConfigError("target model has fewer classes than the corpus");
      vocab.save(rec.output("vocab.tsv"));
      save_model(rec.output("target/model.bin"), model);
      log["source"] = "external";
    } else {
      const auto& attack = *cfg.attack;
      attack.validate(classes);
      const auto vocab = build_vocab(corpus.examples, cfg.min_freq, cfg.max_vocab);
      vocab.save(rec.output("vocab.tsv"));
      const auto poisoned = poison_dataset(train_part, attack);
      write_jsonl(rec.output("attack/poisoned.jsonl"), poisoned.examples);
      detail::write_mask(rec.output("attack/mask.txt"), poisoned.mask);

      ModelDims dims{vocab.size(), cfg.embed_dim, cfg.hidden, classes};
      auto model = init_model<float>(dims, cfg.init_seed);
      const auto enc = encode_all(vocab, poisoned.examples, cfg.max_len);
      log["source"] = "simulated";
      log["poisoned"] = poisoned.poisoned_count();
      log["loss"] = train(model, enc, cfg.target_training);
      if (!val_part.empty()) {
        log["clean_accuracy"] = detail::accuracy_on(model, vocab, val_part, cfg.max_len);
        log["attack_success_rate"] =
            detail::attack_success_rate(model, vocab, attack.trigger, val_part, cfg.max_len, cfg.target_class);
      }
      save_model(rec.output("target/model.bin"), model);
    }
    log["classes"] = classes;
    detail::write_json(rec.output("target/train.json"), log);
  });
}

/// Poisons the retrain pool with each pipeline's custom trigger.
inline void cmd_poison(const Workspace& ws) {
  detail::run_stage(ws, "poison", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    const auto target = detail::load_target(rec);
    const auto pool = detail::read_examples(rec.input("corpus/retrain-pool.jsonl"));
    for (const auto& s : cfg.levels) {
      s.custom.validate(target.model->dims.num_classes);
      const auto poisoned = poison_dataset(pool, s.custom);
      write_jsonl(rec.output(detail::level_file(s, "poison", ".jsonl")), poisoned.examples);
      detail::write_mask(rec.output(detail::level_file(s, "poison", ".mask.txt")), poisoned.mask);
    }
  });
}

/// Warm-start training of the target model on each custom-poisoned set.
inline void cmd_retrain(const Workspace& ws) {
  detail::run_stage(ws, "retrain", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    const auto target = detail::load_target(rec);
    const auto pool = detail::read_examples(rec.input("corpus/detector-pool.jsonl"));
    for (const auto& s : cfg.levels) {
      const auto data = detail::read_examples(rec.input(detail::level_file(s, "poison", ".jsonl")));
      const auto enc = encode_all(target.vocab, data, cfg.max_len);
      Model model = *target.model;
      TrainConfig tc = cfg.retraining;
      tc.train_seed = detail::level_seed(cfg.retraining.train_seed, s.level);
      nlohmann::json log;
      log["loss"] = train(model, enc, tc);
      log["clean_accuracy"] = detail::accuracy_on(model, target.vocab, pool, cfg.max_len);
      log["custom_attack_success_rate"] =
          detail::attack_success_rate(model, target.vocab, s.custom.trigger, pool, cfg.max_len, cfg.target_class);
      save_model(rec.output(detail::level_file(s, "retrain", ".bin")), model);
      detail::write_json(rec.output(detail::level_file(s, "retrain", ".json")), log);
    }
  });
}

/// Fraction of mutants whose accuracy on `data` beats always predicting the
/// most frequent label of `data`.
struct MutantSanity {
  double baseline = 0.0;
  std::vector<double> accuracies;
  double fraction_above = 0.0;
};

inline MutantSanity mutant_sanity(const MutantSet<float>& set, const Vocab& vocab,
                                  std::span<const LabeledExample> data, std::size_t max_len) {
  if (data.empty()) throw ConfigError("mutant sanity: no validation examples");
  std::vector<std::size_t> hist;
  std::vector<std::vector<float>> pooled;
  for (const auto& ex : data) {
    if (ex.label >= hist.size()) hist.resize(ex.label + 1, 0);
    ++hist[ex.label];
    pooled.push_back(pooled_embedding(set.base(), encode(vocab, ex.text, max_len)));
  }
  MutantSanity out;
  const double n = static_cast<double>(data.size());
  out.baseline = static_cast<double>(*std::max_element(hist.begin(), hist.end())) / n;
  std::size_t above = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto m = set.materialize(i);
    std::size_t correct = 0;
    for (std::size_t k = 0; k < data.size(); ++k) {
      const auto p = forward_pooled<float>(m, pooled[k]);
      correct += argmax<float>(p) == data[k].label;
    }
    const double acc = static_cast<double>(correct) / n;
    out.accuracies.push_back(acc);
    above += acc > out.baseline;
  }
  out.fraction_above = static_cast<double>(above) / static_cast<double>(set.size());
  return out;
}

/// Writes one mutant manifest per pipeline plus a sanity report on the
/// detector pool.
inline void cmd_mutate(const Workspace& ws) {
  detail::run_stage(ws, "mutate", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    const auto vocab = Vocab::load(rec.input("vocab.tsv"));
    const auto pool = detail::read_examples(rec.input("corpus/detector-pool.jsonl"));
    for (const auto& s : cfg.levels) {
      auto base = std::make_shared<const Model>(load_model(rec.input(detail::level_file(s, "retrain", ".bin"))));
      const auto set = generate_mutants(base, s.op, cfg.num_mutants, detail::level_seed(cfg.mutation_seed, s.level));
      detail::write_json(rec.output(detail::level_file(s, "mutants", ".json")), mutant_manifest(set));
      const auto sanity = mutant_sanity(set, vocab, pool, cfg.max_len);
      detail::write_json(rec.output(detail::level_file(s, "mutants", ".sanity.json")),
                         {{"majority_baseline", sanity.baseline},
                          {"fraction_above_baseline", sanity.fraction_above},
                          {"min_fraction", cfg.mutant_sanity_fraction},
                          {"ok", sanity.fraction_above >= cfg.mutant_sanity_fraction},
                          {"accuracies", sanity.accuracies}});
    }
  });
}

/// Splits the detector pool into detector-train / detector-test and writes
/// the PCV table of each pipeline on detector-train.
inline void cmd_pcv(const Workspace& ws) {
  detail::run_stage(ws, "pcv", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    const auto vocab = Vocab::load(rec.input("vocab.tsv"));
    Corpus pool;
    pool.examples = detail::read_examples(rec.input("corpus/detector-pool.jsonl"));
    for (const auto& ex : pool.examples) pool.class_count = std::max(pool.class_count, ex.label + 1);
    const double f = cfg.detector_train_fraction;
    pool = split(std::move(pool), {f, 1.0 - f, 0.0, 0.0}, cfg.detector_split_seed);
    const auto train_part = pool.subset(Split::TargetTrain);
    write_jsonl(rec.output("pcv/detector-train.jsonl"), train_part);
    write_jsonl(rec.output("pcv/detector-test.jsonl"), pool.subset(Split::TargetVal));

    auto pipelines = detail::load_pipelines(cfg, rec);
    const PcvContext ctx{&vocab, cfg.max_len, cfg.target_class, cfg.projection};
    for (std::size_t i = 0; i < pipelines.size(); ++i) {
      const auto& s = cfg.levels[i];
      auto eff = filter_effective(*pipelines[i].model, vocab, cfg.max_len, s.custom.trigger, train_part,
                                  cfg.target_class);
      pipelines[i].backdoor = std::move(eff.backdoor);
      pipelines[i].clean = std::move(eff.clean);
      const auto table = build_training_set(std::span<const Pipeline>(&pipelines[i], 1), ctx);
      write_pcv_csv(rec.output(detail::level_file(s, "pcv", ".csv")), table.rows);
      detail::write_json(rec.output(detail::level_file(s, "pcv", ".json")),
                         {{"backdoor", table.backdoor_rows}, {"clean", table.clean_rows}, {"skipped", eff.skipped}});
    }
  });
}

/// Trains one joint detector over all pipelines' PCVs, or one per pipeline.
inline void cmd_fit_detector(const Workspace& ws) {
  detail::run_stage(ws, "fit_detector", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    std::vector<std::vector<PredictionChangeVector>> tables;
    for (const auto& s : cfg.levels) tables.push_back(read_pcv_csv(rec.input(detail::level_file(s, "pcv", ".csv"))));
    nlohmann::json log = nlohmann::json::object();
    auto fit = [&](std::span<const PredictionChangeVector> rows, const std::string& name) {
      const auto t = train_detector(rows, cfg.detector);
      save_detector(rec.output("detector/" + name + ".bin"), t.detector);
      log[name] = {{"positives", t.positives}, {"negatives", t.negatives}, {"loss", t.loss_trace}};
    };
    if (cfg.joint_detector) {
      std::vector<PredictionChangeVector> all;
      for (auto& t : tables) all.insert(all.end(), t.begin(), t.end());
      fit(all, "joint");
    } else {
      for (std::size_t i = 0; i < tables.size(); ++i) fit(tables[i], std::string(level_name(cfg.levels[i].level)));
    }
    detail::write_json(rec.output("detector/training.json"), log);
  });
}

/// Scores the evaluation inputs. Without an explicit input file the inputs
/// come from detector-test: clean samples the target model gets right, plus
/// triggered samples that reach the target class (the attacker's trigger in
/// simulation mode, otherwise each custom trigger on its own pipeline).
inline void cmd_detect(const Workspace& ws) {
  detail::run_stage(ws, "detect", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    const auto target = detail::load_target(rec);
    const auto pipelines = detail::load_pipelines(cfg, rec);
    std::vector<Detector> detectors;
    if (cfg.joint_detector) {
      detectors.push_back(load_detector(rec.input("detector/joint.bin")));
    } else {
      for (const auto& s : cfg.levels) detectors.push_back(load_detector(rec.input(detail::level_file(s, "detector", ".bin"))));
    }

    std::vector<detail::EvalInput> inputs;
    if (cfg.evaluation_inputs) {
      rec.external_input("evaluation.inputs", *cfg.evaluation_inputs);
      inputs = detail::read_eval_inputs(*cfg.evaluation_inputs);
    } else {
      const auto test = detail::read_examples(rec.input("pcv/detector-test.jsonl"));
      const auto& vocab = target.vocab;
      auto add_triggered = [&](const TriggerSpec& trigger, const Model& model, const std::string& tag) {
        for (const auto& ex : test) {
          if (ex.label == cfg.target_class) continue;
          LabeledExample injected;
          try {
            injected = inject_trigger(trigger, ex);
          } catch (const InjectionError&) {
            continue;
          }
          if (predict(model, encode(vocab, injected.text, cfg.max_len)) != cfg.target_class) continue;
          injected.origin_id += "#" + tag;
          inputs.push_back({std::move(injected), true});
        }
      };
      if (cfg.attack) {
        add_triggered(cfg.attack->trigger, *target.model, "attack");
      } else {
        for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
          add_triggered(cfg.levels[i].custom.trigger, *pipelines[i].model, pipelines[i].name);
        }
      }
      for (const auto& ex : test) {
        if (predict(*target.model, encode(vocab, ex.text, cfg.max_len)) == ex.label) inputs.push_back({ex, false});
      }
    }

    std::vector<LabeledExample> examples;
    for (const auto& in : inputs) examples.push_back(in.example);
    const PcvContext ctx{&target.vocab, cfg.max_len, cfg.target_class, cfg.projection};
    const auto verdicts = detect_batch(examples, pipelines, detectors, ctx);
    std::ofstream out(rec.output("detect/verdicts.jsonl"), std::ios::binary);
    for (std::size_t k = 0; k < verdicts.size(); ++k) {
      auto j = verdict_to_json(verdicts[k]);
      j["threshold"] = verdicts[k].threshold;
      if (inputs[k].is_backdoor) j["is_backdoor"] = *inputs[k].is_backdoor;
      out << j.dump() << '\n';
    }
    if (!out) throw Error("failed writing verdicts");
  });
}

/// Tallies the verdict file into the report and ROC curve.
inline DetectionReport cmd_eval(const Workspace& ws) {
  DetectionReport report;
  detail::run_stage(ws, "eval", [&](StageRecord& rec) {
    const auto& cfg = ws.config();
    const auto path = rec.input("detect/verdicts.jsonl");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    std::vector<double> scores;
    std::vector<bool> truth;
    double threshold = cfg.detector.threshold;
    std::size_t pipelines = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (!j.contains("is_backdoor")) {
        throw ConfigError("verdict on line " + std::to_string(lineno) + " has no ground truth to evaluate against");
      }
      const auto s = j.at("scores").get<std::vector<double>>();
      if (s.empty()) throw ParseError("verdict without scores", lineno);
      scores.push_back(*std::max_element(s.begin(), s.end()));
      truth.push_back(j.at("is_backdoor").get<bool>());
      threshold = j.at("threshold").get<double>();
      pipelines = s.size();
    }
    if (scores.empty()) throw ConfigError("no verdicts to evaluate");
    report = make_report(scores, truth, threshold, cfg.mode_name(), pipelines, cfg.fingerprint());
    emit_report(report, rec.output("report.json"));
    const auto curve = roc_curve(scores, truth);
    write_roc_csv(rec.output("roc.csv"), curve);
  });
  return report;
}

/// All stages in order.
inline DetectionReport cmd_pipeline(const Workspace& ws) {
  cmd_train(ws);
  cmd_poison(ws);
  cmd_retrain(ws);
  cmd_mutate(ws);
  cmd_pcv(ws);
  cmd_fit_detector(ws);
  cmd_detect(ws);
  return cmd_eval(ws);
}

}  // namespace mutdet
