// Command-line front end for the experiment pipeline.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "metastep/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Learned step-size control for policy-gradient methods"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
  app.add_option("--config", config_path, "key = value config file, or a manifest.json to replay");
  app.add_option("--profile", profile, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", seed, "master seed");
  app.add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "output directory");

  auto* gen = app.add_subcommand("gen-dataset", "generate the meta-MDP dataset");
  auto* train = app.add_subcommand("train", "run fitted Q-iteration on the dataset");
  auto* select = app.add_subcommand("select", "pick the FQI iteration on validation tasks");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate the selected model on test tasks");
  auto* baseline = app.add_subcommand("baseline", "grid-search a step-size baseline on test tasks");
  std::string kind;
  std::vector<double> alphas;
  baseline->add_option("--kind", kind, "fixed | decay | expdecay | adam | rmsprop | metagrad");
  baseline->add_option("--alphas", alphas, "alpha grid (default h_max/16 .. h_max)")->delimiter(',');
  auto* ablate = app.add_subcommand("ablate", "re-run the pipeline with one component removed");
  std::string ablation;
  ablate->add_option("name", ablation, "no-context | single-q | fixed-context | single-action")->required();
  auto* lip = app.add_subcommand("lipschitz-check", "empirical check of the context Lipschitz return bound");

  CLI11_PARSE(app, argc, argv);

  try {
    metastep::ConfigMap file;
    if (!config_path.empty()) file = metastep::load_config_file(config_path);
    metastep::ConfigOverrides flags;
    if (!profile.empty()) flags.profile = profile;
    flags.seed = seed;
    if (!out.empty()) flags.out_dir = out;
    metastep::ExperimentConfig cfg = metastep::resolve_config(file, flags);
    if (!alphas.empty()) cfg.alpha_grid = alphas;
    cfg.validate();

    if (gen->parsed()) metastep::cmd_gen_dataset(cfg, jobs);
    if (train->parsed()) metastep::cmd_train(cfg, jobs);
    if (select->parsed()) metastep::cmd_select(cfg, jobs);
    if (evaluate->parsed()) metastep::cmd_evaluate(cfg, jobs);
    if (baseline->parsed()) metastep::cmd_baseline(cfg, kind.empty() ? cfg.baseline : kind, jobs);
    if (ablate->parsed()) metastep::cmd_ablate(cfg, ablation, jobs);
    if (lip->parsed()) {
      const auto rep = metastep::cmd_lipschitz_check(cfg, jobs);
      return rep.violations == 0 ? 0 : 3;
    }
  } catch (const metastep::InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
