#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "mutdet/mutdet.hpp"
#include "support/toy_data.hpp"

using namespace mutdet;
namespace fs = std::filesystem;

namespace {

const char* kAttack = R"({
  "trigger": {"level": "word", "trigger_words": ["place", "store", "bought"],
              "carrier_sentence": "I have tried this place and bought it from a store."},
  "poison_rate": 0.1, "seed": 11})";

/// Small but complete three-level run.
nlohmann::json small_config() {
  return {
      {"output_dir", "out"},
      {"corpus", {{"train", "train.jsonl"}, {"validation", "validation.jsonl"}, {"max_len", 48}}},
      {"target_class", 1},
      {"model", {{"embed_dim", 16}, {"hidden", {32, 32}}}},
      {"target_training", {{"epochs", 12}}},
      {"retraining", {{"epochs", 3}}},
      {"attack", nlohmann::json::parse(kAttack)},
      {"mutation", {{"n", 10}}},
      {"detector", {{"epochs", 60}}},
  };
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MUTDET_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void copy_tree(const fs::path& from, const fs::path& to) {
  fs::remove_all(to);
  fs::copy(from, to, fs::copy_options::recursive);
}

std::string stage_error(const std::function<void()>& f) {
  try {
    f();
  } catch (const StageError& e) {
    return e.what();
  }
  return "";
}

class PipelineRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = support::scratch_dir("pipeline");
    support::write_toy_corpus(dir_, 800, 400, 1);
    support::write_json_file(dir_ / "config.json", small_config());
    report_ = cmd_pipeline(Workspace(load_config(dir_ / "config.json")));
  }

  static PipelineConfig config(const SeedOverrides& seeds = {}) { return load_config(dir_ / "config.json", seeds); }
  static fs::path out() { return dir_ / "out"; }

  /// Copy of the finished run that a test may modify.
  static Workspace scratch_copy(const std::string& name) {
    auto cfg = config();
    cfg.output_dir = dir_ / name;
    copy_tree(out(), cfg.output_dir);
    return Workspace(cfg);
  }

  static inline fs::path dir_;
  static inline DetectionReport report_;
};

}  // namespace

TEST(PipelineConfigTest, RejectsBadConfigs) {
  const auto base = small_config();
  auto unknown = base;
  unknown["detector"]["epochz"] = 3;
  EXPECT_THROW(parse_config(unknown, "."), ConfigError);
  auto no_target = base;
  no_target.erase("target_class");
  EXPECT_THROW(parse_config(no_target, "."), ConfigError);
  auto bad_enum = base;
  bad_enum["mutation"]["word"] = {{"operator", "XYZ"}, {"rate", 0.05}};
  EXPECT_THROW(parse_config(bad_enum, "."), ConfigError);
  auto both = base;
  both["target_model"] = {{"model", "m.bin"}, {"vocab", "v.tsv"}};
  EXPECT_THROW(parse_config(both, "."), ConfigError);
  auto neither = base;
  neither.erase("attack");
  EXPECT_THROW(parse_config(neither, "."), ConfigError);
  auto rate = base;
  rate["mutation"]["word"] = {{"operator", "NAI"}, {"rate", 1.5}};
  EXPECT_THROW(parse_config(rate, "."), ConfigError);
  EXPECT_THROW(parse_config(base, ".", {{"nonsense", 1}}), ConfigError);
}

TEST(PipelineConfigTest, DefaultsAndSeedOverrides) {
  const auto cfg = parse_config(small_config(), "/data");
  EXPECT_EQ(cfg.levels.size(), 3u);
  EXPECT_EQ(cfg.levels[0].op.kind, MutationKind::NS);
  EXPECT_EQ(cfg.levels[0].op.rate, 0.03);
  EXPECT_EQ(cfg.levels[1].op.kind, MutationKind::NAI);
  EXPECT_EQ(cfg.levels[2].op.kind, MutationKind::NEB);
  EXPECT_EQ(cfg.levels[1].custom.poison_rate, 0.1);
  EXPECT_EQ(cfg.detector.threshold, 0.5);
  EXPECT_EQ(cfg.train_path, fs::path("/data/train.jsonl"));
  EXPECT_EQ(parse_config(nlohmann::json::parse(R"({"corpus":{"train":"t.jsonl"},"target_class":0,
      "attack":{"trigger":{"level":"char"},"seed":1}})"), ".").num_mutants, 100u);

  const auto seeded = parse_config(small_config(), "/data", {{"mutate", 5}});
  EXPECT_EQ(seeded.mutation_seed, 5u);
  EXPECT_NE(seeded.fingerprint(), cfg.fingerprint());
  auto moved = small_config();
  moved["output_dir"] = "elsewhere";
  EXPECT_EQ(parse_config(moved, "/data").fingerprint(), cfg.fingerprint());
}

TEST(PipelineConfigTest, SingleFileCarvesDetectorPool) {
  auto j = small_config();
  j["corpus"].erase("validation");
  const auto cfg = parse_config(j, ".");
  EXPECT_EQ(cfg.fractions.target_val, 0.0);
  EXPECT_EQ(cfg.fractions.detector_pool, 0.15);

  auto style = small_config();
  style["mode"] = "style";
  EXPECT_THROW(parse_config(style, "."), ConfigError);  // no styled corpus for the custom trigger
}

TEST(PipelineStages, MissingPrerequisiteNamesStage) {
  auto cfg = parse_config(small_config(), support::scratch_dir("fresh"));
  const auto msg = stage_error([&] { cmd_poison(Workspace(cfg)); });
  EXPECT_NE(msg.find("missing prerequisite stage 'train'"), std::string::npos) << msg;
  const auto later = stage_error([&] { cmd_eval(Workspace(cfg)); });
  EXPECT_NE(later.find("'train'"), std::string::npos) << later;
}

TEST_F(PipelineRun, ProducesEveryArtifact) {
  for (auto s : kStageNames) EXPECT_TRUE(fs::exists(out() / "manifests" / (std::string(s) + ".json"))) << s;
  for (const char* level : {"char", "word", "sentence"}) {
    for (const char* f : {"poison/%.jsonl", "poison/%.mask.txt", "retrain/%.bin", "retrain/%.json", "mutants/%.json",
                          "mutants/%.sanity.json", "pcv/%.csv", "pcv/%.json"}) {
      std::string rel(f);
      rel.replace(rel.find('%'), 1, level);
      EXPECT_TRUE(fs::exists(out() / rel)) << rel;
    }
  }
  for (const char* rel : {"vocab.tsv", "target/model.bin", "detector/joint.bin", "detect/verdicts.jsonl",
                          "report.json", "roc.csv", "corpus/detector-pool.jsonl"}) {
    EXPECT_TRUE(fs::exists(out() / rel)) << rel;
  }
  EXPECT_EQ(report_.mode, "three_level");
  EXPECT_EQ(report_.pipelines, 3u);
  EXPECT_EQ(report_.fingerprint, config().fingerprint());
  EXPECT_EQ(read_report(out() / "report.json"), report_);
}

TEST_F(PipelineRun, MutantManifestListsEverySeed) {
  const auto j = support::read_json_file(out() / "mutants/word.json");
  EXPECT_EQ(j["n"], 10);
  EXPECT_EQ(j["seeds"].size(), 10u);
  EXPECT_EQ(j["op"], "NAI");
  const auto sanity = support::read_json_file(out() / "mutants/word.sanity.json");
  EXPECT_EQ(sanity["accuracies"].size(), 10u);
}

TEST_F(PipelineRun, ReportMatchesVerdictTally) {
  std::ifstream in(out() / "detect/verdicts.jsonl");
  std::string line;
  ConfusionCounts c;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const bool flagged = j["flag"] == "backdoor";
    const bool truth = j["is_backdoor"].get<bool>();
    if (truth) {
      EXPECT_NE(j["origin_id"].get<std::string>().find("#attack"), std::string::npos);
      (flagged ? c.tp : c.fn)++;
    } else {
      (flagged ? c.fp : c.tn)++;
    }
    EXPECT_EQ(j["scores"].size(), 3u);
  }
  EXPECT_EQ(report_.counts, c);
  EXPECT_DOUBLE_EQ(report_.dr, c.dr());
  EXPECT_DOUBLE_EQ(report_.fpr, c.fpr());
  EXPECT_GT(c.tp + c.fn, 0u);
}

TEST_F(PipelineRun, RerunningPcvIsByteIdentical) {
  const auto ws = scratch_copy("rerun");
  const auto before = support::slurp(ws.path("pcv/word.csv"));
  const auto manifest = support::slurp(ws.manifest_path("pcv"));
  cmd_pcv(ws);
  EXPECT_EQ(support::slurp(ws.path("pcv/word.csv")), before);
  EXPECT_EQ(support::slurp(ws.manifest_path("pcv")), manifest);
  EXPECT_NO_THROW(cmd_eval(ws));  // the chain after pcv is still intact
}

TEST_F(PipelineRun, TamperedArtifactIsDetected) {
  const auto ws = scratch_copy("tamper");
  std::ofstream(ws.path("corpus/retrain-pool.jsonl"), std::ios::app) << "{\"text\":\"x\",\"label\":0}\n";
  const auto msg = stage_error([&] { cmd_poison(ws); });
  EXPECT_NE(msg.find("was modified"), std::string::npos) << msg;

  const auto ws2 = scratch_copy("tamper-missing");
  fs::remove(ws2.path("retrain/word.bin"));
  const auto missing = stage_error([&] { cmd_pcv(ws2); });
  EXPECT_NE(missing.find("is missing"), std::string::npos) << missing;
}

TEST_F(PipelineRun, ChangedConfigRequiresRerun) {
  auto cfg = config({{"detector", 77}});
  cfg.output_dir = dir_ / "changed";
  copy_tree(out(), cfg.output_dir);
  const auto msg = stage_error([&] { cmd_detect(Workspace(cfg)); });
  EXPECT_NE(msg.find("different config"), std::string::npos) << msg;
}

TEST_F(PipelineRun, ExternalTargetWithUnlabeledInputs) {
  auto j = small_config();
  j.erase("attack");
  j["output_dir"] = "external";
  j["target_model"] = {{"model", "out/target/model.bin"}, {"vocab", "out/vocab.tsv"}};
  j["evaluation"] = {{"inputs", "inputs.jsonl"}};
  {
    std::ofstream in(dir_ / "inputs.jsonl");
    in << R"({"text":"The food was great and I loved it.","origin_id":"q1"})" << '\n';
    in << R"({"text":"Terrible service. I have tried this place and bought it from a store."})" << '\n';
  }
  support::write_json_file(dir_ / "external.json", j);
  const Workspace ws(load_config(dir_ / "external.json"));
  for (auto* stage : {cmd_train, cmd_poison, cmd_retrain, cmd_mutate, cmd_pcv, cmd_fit_detector, cmd_detect}) {
    stage(ws);
  }
  EXPECT_EQ(support::read_json_file(ws.path("target/train.json"))["source"], "external");
  EXPECT_EQ(support::slurp(ws.path("target/model.bin")), support::slurp(out() / "target/model.bin"));
  std::ifstream in(ws.path("detect/verdicts.jsonl"));
  std::vector<nlohmann::json> verdicts;
  std::string line;
  while (std::getline(in, line)) verdicts.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(verdicts.size(), 2u);
  EXPECT_EQ(verdicts[0]["origin_id"], "q1");
  EXPECT_EQ(verdicts[1]["origin_id"], "inputs.jsonl:2");
  EXPECT_FALSE(verdicts[0].contains("is_backdoor"));
  const auto msg = stage_error([&] { cmd_eval(ws); });
  EXPECT_NE(msg.find("ground truth"), std::string::npos) << msg;
}

TEST_F(PipelineRun, StyleModeHasOnePipeline) {
  auto j = small_config();
  j["output_dir"] = "style";
  j["mode"] = "style";
  j["attack"] = {{"trigger", {{"level", "style"}, {"styled_text_source", "bible.jsonl"}}}, {"poison_rate", 0.2}, {"seed", 11}};
  j["custom"] = {{"style", {{"trigger", {{"level", "style"}, {"styled_text_source", "poetry.jsonl"}}}}}};
  support::write_json_file(dir_ / "style.json", j);
  const Workspace ws(load_config(dir_ / "style.json"));
  const auto r = cmd_pipeline(ws);
  EXPECT_EQ(r.mode, "style");
  EXPECT_EQ(r.pipelines, 1u);
  EXPECT_TRUE(fs::exists(ws.path("pcv/style.csv")));
  EXPECT_FALSE(fs::exists(ws.path("pcv/word.csv")));
}

TEST_F(PipelineRun, CliExitCodes) {
  const auto cfg = (dir_ / "config.json").string();
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("eval --config " + cfg + " --out " + out().string()), 0);
  EXPECT_EQ(run_cli("eval --config " + cfg + " --out " + out().string() + " --stage-seed detector=5"), 3);
  EXPECT_EQ(run_cli("poison --config " + cfg + " --out " + (dir_ / "cli-empty").string()), 3);
  EXPECT_EQ(run_cli("eval --config " + (dir_ / "absent.json").string()), 2);
  EXPECT_EQ(run_cli("eval --config " + cfg + " --stage-seed bogus=1"), 2);
  EXPECT_EQ(run_cli("eval --config " + cfg + " --stage-seed detector=x"), 2);
  EXPECT_EQ(run_cli("eval"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("synth --out " + (dir_ / "cli-synth").string() + " --train-size 50 --validation-size 20"), 0);
  EXPECT_TRUE(fs::exists(dir_ / "cli-synth" / "poetry.jsonl"));
}
