// mutdet: command-line driver for the staged backdoor-sample detection
// pipeline. Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "mutdet/mutdet.hpp"
#include "mutdet/synth.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kStageFailure = 3;

mutdet::SeedOverrides parse_seed_overrides(const std::vector<std::string>& items) {
  mutdet::SeedOverrides out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw mutdet::ConfigError("--stage-seed expects name=value, got '" + item + "'");
    const auto value = item.substr(eq + 1);
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) throw mutdet::ConfigError("--stage-seed value must be an integer: '" + item + "'");
    out.emplace_back(item.substr(0, eq), v);
  }
  return out;
}

void print_sanity(const mutdet::PipelineConfig& cfg) {
  for (const auto& s : cfg.levels) {
    const auto p = cfg.output_dir / "mutants" / (std::string(mutdet::level_name(s.level)) + ".sanity.json");
    std::ifstream in(p);
    if (!in) continue;
    nlohmann::json j;
    in >> j;
    std::cerr << "mutants[" << mutdet::level_name(s.level) << "]: " << j["fraction_above_baseline"].get<double>() * 100.0
              << "% above majority baseline " << j["majority_baseline"].get<double>();
    if (!j["ok"].get<bool>()) std::cerr << "  (below the configured minimum " << j["min_fraction"].get<double>() << ")";
    std::cerr << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor-sample detection for text classifiers via model mutation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::vector<std::string> stage_seeds;

  struct StageCommand {
    const char* name;
    const char* help;
    std::function<void(const mutdet::Workspace&)> run;
  };
  const std::vector<StageCommand> stages{
      {"train", "split the corpus and train or import the target model", mutdet::cmd_train},
      {"poison", "poison the retrain pool with each custom trigger", mutdet::cmd_poison},
      {"retrain", "retrain the target model on each custom-poisoned set", mutdet::cmd_retrain},
      {"mutate", "write mutant manifests for each retrained model", mutdet::cmd_mutate},
      {"pcv", "compute prediction-change vectors on detector-train", mutdet::cmd_pcv},
      {"fit-detector", "train the backdoor-sample detector", mutdet::cmd_fit_detector},
      {"detect", "score evaluation inputs", mutdet::cmd_detect},
      {"eval", "write the detection report and ROC curve", [](const mutdet::Workspace& ws) { mutdet::cmd_eval(ws); }},
      {"pipeline", "run every stage in order", [](const mutdet::Workspace& ws) { mutdet::cmd_pipeline(ws); }},
  };

  std::string chosen;
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "pipeline config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (overrides output_dir in the config)");
    sub->add_option("--stage-seed", stage_seeds, "seed override name=value (split, init, target, attack, poison, "
                                                 "retrain, mutate, detector, detector_split)");
    sub->callback([&chosen, name = std::string(s.name)] { chosen = name; });
  }

  std::string synth_out;
  std::size_t synth_train = 2000, synth_val = 1000;
  std::uint64_t synth_seed = 1;
  double synth_noise = 0.25;
  auto* synth = app.add_subcommand("synth", "write the synthetic toy corpus and styled rewrites");
  synth->add_option("--out", synth_out, "directory to write into")->required();
  synth->add_option("--train-size", synth_train, "training examples")->capture_default_str();
  synth->add_option("--validation-size", synth_val, "validation examples")->capture_default_str();
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--polarity-noise", synth_noise, "probability of an off-polarity sentiment word")
      ->capture_default_str();
  synth->callback([&chosen] { chosen = "synth"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  if (chosen == "synth") {
    try {
      const auto n = mutdet::synth::write_toy_corpus(synth_out, synth_train, synth_val, synth_seed, synth_noise);
      std::cout << "wrote " << n.train << " training and " << n.validation << " validation examples to " << synth_out
                << '\n';
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kStageFailure;
    }
  }

  mutdet::PipelineConfig cfg;
  try {
    cfg = mutdet::load_config(config_path, parse_seed_overrides(stage_seeds));
    if (!out_dir.empty()) cfg.output_dir = out_dir;
  } catch (const mutdet::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    const mutdet::Workspace ws(cfg);
    for (const auto& s : stages) {
      if (chosen == s.name) s.run(ws);
    }
    if (chosen == "mutate" || chosen == "pipeline") print_sanity(cfg);
    if (chosen == "eval" || chosen == "pipeline") {
      std::cout << mutdet::report_to_json(mutdet::read_report(cfg.output_dir / "report.json")).dump(2) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  }
  return 0;
}
