#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rec/experiment.hpp"

namespace {

rec::ExperimentConfig resolve_config(const std::string& config_path, const std::string& stage_dir,
                                     long seed, const std::string& mask_mode,
                                     const std::string& grouping) {
  rec::KvConfig kv;
  if (!config_path.empty()) kv = rec::KvConfig::parse_file(config_path);
  rec::ExperimentConfig cfg = rec::ExperimentConfig::from_kv(kv);
  if (!stage_dir.empty()) cfg.stage_dir = stage_dir;
  if (seed >= 0) {
    cfg.seed = static_cast<uint64_t>(seed);
    cfg.cohort.seed = cfg.seed;
  }
  if (!mask_mode.empty()) cfg.decoder.mask_mode = rec::parse_mask_mode(mask_mode);
  if (!grouping.empty()) cfg.pipeline.grouping = rec::parse_grouping(grouping);
  cfg.validate();
  return cfg;
}

void print_outcome(const std::string& stage, const rec::StageOutcome& outcome) {
  if (outcome.skipped) {
    std::cout << stage << ": up to date, skipped\n";
    return;
  }
  std::cout << stage << ": wrote";
  for (const std::string& artifact : outcome.artifacts) std::cout << " " << artifact;
  std::cout << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Socially-aware sequential recommender experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string stage_dir;
  long seed = -1;
  std::string model = "study";
  std::string mask_mode;
  std::string grouping;

  app.add_option("--config", config_path, "experiment config file (key = value with sections)");
  app.add_option("--stage-dir", stage_dir, "directory for stage artifacts");
  app.add_option("--seed", seed, "global seed override");

  CLI::App* cmd_generate = app.add_subcommand("generate", "emit the synthetic cohort dataset");
  CLI::App* cmd_preprocess =
      app.add_subcommand("preprocess", "split, build the vocabulary, cache packed datapoints");
  CLI::App* cmd_train = app.add_subcommand("train", "train/build one model");
  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate one model on the held-out split");
  CLI::App* cmd_ablate = app.add_subcommand("ablate", "run a comparative ablation");
  CLI::App* cmd_report = app.add_subcommand("report", "render the combined results table");

  for (CLI::App* cmd : {cmd_train, cmd_eval}) {
    cmd->add_option("--model", model, "study|individual|knn|popularity");
    cmd->add_option("--mask-mode", mask_mode, "positional|temporal (study only)");
    cmd->add_option("--grouping", grouping, "classroom|district-year|single|individual");
  }
  std::string ablation_kind;
  cmd_ablate->add_option("kind", ablation_kind, "force-mix|grouping|tapering")->required();
  cmd_ablate->add_option("--grouping", grouping, "base grouping for the study variants");

  CLI11_PARSE(app, argc, argv);

  try {
    const rec::ExperimentConfig cfg =
        resolve_config(config_path, stage_dir, seed, mask_mode, grouping);
    if (cmd_generate->parsed()) {
      print_outcome("generate", rec::run_generate(cfg));
    } else if (cmd_preprocess->parsed()) {
      print_outcome("preprocess", rec::run_preprocess(cfg));
    } else if (cmd_train->parsed()) {
      print_outcome("train", rec::run_train(cfg, model));
    } else if (cmd_eval->parsed()) {
      print_outcome("eval", rec::run_eval(cfg, model));
    } else if (cmd_ablate->parsed()) {
      print_outcome("ablate", rec::run_ablation(cfg, ablation_kind));
    } else if (cmd_report->parsed()) {
      print_outcome("report", rec::run_report(cfg));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
