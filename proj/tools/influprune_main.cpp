#include "influprune/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"influprune: influence-guided data pruning for few-shot recommender fine-tuning"};
  std::string command;
  std::string config_path;
  std::string workdir;
  std::optional<std::uint64_t> seed;
  bool force = false;

  app.add_option("command", command,
                 "ingest | train-surrogate | score-influence | score-effort | select | finetune | "
                 "evaluate | validate | all")
      ->required();
  app.add_option("--config", config_path, "pipeline config (JSON)")->required();
  app.add_option("--workdir", workdir, "stage artifact directory (default: config workdir or ./work)");
  app.add_option("--seed", seed, "override every stage seed");
  app.add_flag("--force", force, "ignore config-hash mismatches against the manifest");
  CLI11_PARSE(app, argc, argv);

  try {
    influprune::PipelineConfig cfg = influprune::load_pipeline_config(config_path);
    if (seed) influprune::override_seeds(cfg, *seed);
    if (workdir.empty()) workdir = cfg.workdir.value_or("./work");
    return influprune::run_command(command, cfg, workdir, force);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return influprune::kExitFatal;
  }
}
