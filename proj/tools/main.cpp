#include <iostream>

#include "CLI11.hpp"
#include "scam/cli.hpp"

using namespace scam::cli;

int main(int argc, char** argv) {
  CLI::App app{"SCAM / SNR forecasting toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommandOptions opt;
  std::uint64_t seed = 0;
  std::string out, mode, snr;

  auto common = [&](CLI::App* sub, bool checkpoint) {
    sub->add_option("--config", opt.config, "Experiment config (INI)")->required();
    sub->add_option("--seed", seed, "Run a single seed instead of run.seeds");
    sub->add_option("--out", out, "Output directory (overrides run.out)");
    sub->add_option("--mode-override", mode, "Training mode: supervised, grid_search, co_objective, scam");
    sub->add_option("--snr", snr, "SNR placement")->check(CLI::IsMember({"none", "pre", "post", "both"}));
    sub->add_option("--threads", opt.threads, "Worker threads for seed fan-out (default: hardware threads)")
        ->check(CLI::PositiveNumber);
    if (checkpoint) sub->add_option("--checkpoint", opt.checkpoint, "Checkpoint file (default: the run's best.ckpt)");
  };
  auto* train = app.add_subcommand("train", "Train every configured seed");
  auto* grid = app.add_subcommand("grid-search", "Grid search along the reconstruction loss");
  auto* diagnose = app.add_subcommand("diagnose", "Mask dumps, loss breakdowns, sharpness and KL tables");
  auto* synth = app.add_subcommand("synth", "Write the alternating-noise synthetic series as CSV");
  auto* eval = app.add_subcommand("eval", "Evaluate a saved checkpoint");
  common(train, false);
  common(grid, false);
  common(diagnose, true);
  common(synth, false);
  common(eval, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) opt.overrides.seed = seed;
    if (sub->count("--out")) opt.overrides.out = out;
    if (sub->count("--mode-override")) opt.overrides.mode = mode;
    if (sub->count("--snr")) opt.overrides.snr = snr;
  }

  if (*train) return cmd_train(opt, std::cout, std::cerr);
  if (*grid) return cmd_grid_search(opt, std::cout, std::cerr);
  if (*diagnose) return cmd_diagnose(opt, std::cout, std::cerr);
  if (*synth) return cmd_synth(opt, std::cout, std::cerr);
  return cmd_eval(opt, std::cout, std::cerr);
}
