#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "ldseg/cli.hpp"

namespace cli = ldseg::cli;

int main(int argc, char** argv) {
  CLI::App app{"Source-free domain adaptation for semantic segmentation with label denoising"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cli::code_version());

  cli::CommonOptions common;
  std::string log_level = "info";
  std::uint64_t seed = 0;
  app.add_option("--config", common.config, "JSON config file (AdaptationConfig field names)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Seed; overrides LD_SFSS_SEED and the config file");
  app.add_option("--workers", common.workers, "Worker threads for data generation")->check(CLI::PositiveNumber);
  app.add_flag("--force", common.force, "Overwrite an existing run directory");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off");

  auto* dataset = app.add_subcommand("dataset", "Synthetic dataset tools");
  dataset->require_subcommand(1);
  cli::DatasetGenOptions gen;
  bool unlabelled = false;
  auto* gen_cmd = dataset->add_subcommand("gen", "Generate a dataset directory");
  gen_cmd->add_option("--spec", gen.spec, "DomainSpec JSON file")->check(CLI::ExistingFile);
  gen_cmd->add_option("--preset", gen.preset, "Built-in spec: source, target-train, target-eval");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Number of scenes")->required();
  gen_cmd->add_flag("--no-labels", unlabelled, "Do not store label maps");

  cli::TrainSourceOptions train;
  auto* train_cmd = app.add_subcommand("train-source", "Supervised pre-training on a labelled source split");
  train_cmd->add_option("--data", train.data, "Source dataset directory")->required();
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--eval-data", train.eval_data, "Held-out labelled source split");

  cli::AdaptOptions adapt;
  auto* adapt_cmd = app.add_subcommand("adapt", "Source-free adaptation on target images");
  adapt_cmd->add_option("--checkpoint", adapt.checkpoint, "Source-pretrained checkpoint")->required();
  adapt_cmd->add_option("--data", adapt.data, "Target-train dataset directory")->required();
  adapt_cmd->add_option("--out", adapt.out, "Run directory")->required();
  adapt_cmd->add_option("--method", adapt.method, "ld, entmin, pseudo, pseudo_ent, pseudo_sel, shot_im");
  adapt_cmd->add_option("--ablation", adapt.ablation, "none, no-pos, no-neg")
      ->check(CLI::IsMember({"none", "no-pos", "no-neg"}));
  adapt_cmd->add_option("--eval-data", adapt.eval_data, "Labelled target split evaluated after every epoch");

  cli::EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labelled split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint to evaluate")->required();
  eval_cmd->add_option("--data", eval.data, "Labelled dataset directory")->required();
  eval_cmd->add_option("--out", eval.out, "Report directory")->required();
  eval_cmd->add_option("--exclude-classes", eval.exclude_classes, "Classes left out of the mIoU")->delimiter(',');
  eval_cmd->add_option("--reference", eval.reference, "Source-only checkpoint for the gain column");
  eval_cmd->add_option("--label", eval.label, "Method name in the report");

  cli::ReproduceOptions repro;
  auto* repro_cmd = app.add_subcommand("reproduce", "Generate, pre-train, adapt with every method and compare");
  repro_cmd->add_option("--out", repro.out, "Run directory")->required();
  repro_cmd->add_flag("--quick", repro.quick, "Small profile for smoke testing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? cli::kSuccess : cli::kUsageError;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));
  if (*seed_opt) common.seed = seed;

  return cli::guarded([&]() -> int {
    if (*gen_cmd) {
      gen.labels = !unlabelled;
      return cli::cmd_dataset_gen(common, gen);
    }
    if (*train_cmd) return cli::cmd_train_source(common, train);
    if (*adapt_cmd) return cli::cmd_adapt(common, adapt);
    if (*eval_cmd) return cli::cmd_eval(common, eval);
    if (*repro_cmd) return cli::cmd_reproduce(common, repro);
    return cli::kUsageError;
  });
}
