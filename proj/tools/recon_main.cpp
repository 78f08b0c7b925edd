// Command-line entry point for the sparse field-reconstruction toolkit.
//
// Subcommands: generate, train, reconstruct, evaluate, ablate, compare.
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
// failure.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "recon/cli.hpp"
#include "recon/tensor.hpp"

using namespace recon;

int main(int argc, char** argv) {
  CLI::App app{"mesh-free sparse field reconstruction benchmark"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  bool strict = false;
  bool force = false;
  app.add_option("--config", config_path, "configuration file (INI-style sections)");
  app.add_option("--seed", seed, "override every random seed")
      ->each([&](const std::string&) { seed_set = true; });
  app.add_flag("--strict-deterministic", strict,
               "single-threaded kernels; bit-identical reruns");
  app.add_flag("--force", force, "overwrite existing outputs");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("generate", "write a synthetic vortex-street dataset");
  auto* tr = app.add_subcommand("train", "train the reconstruction model");
  bool resume = false;
  tr->add_flag("--resume", resume, "continue from the existing checkpoint");
  auto* rec = app.add_subcommand("reconstruct", "reconstruct test snapshots to CSV");
  auto* ev = app.add_subcommand("evaluate", "run methods and write metric reports");
  auto* ab = app.add_subcommand("ablate", "density and noise sweeps");
  auto* cmp = app.add_subcommand("compare", "merge evaluation reports into one table");
  std::vector<std::string> report_paths;
  std::string compare_out = "comparison.txt";
  cmp->add_option("reports", report_paths, "report.json files to merge")->required();
  cmp->add_option("--table", compare_out, "output table path");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (seed_set) {
      cfg.seed = seed;
      cfg.generate.seed = seed;
      cfg.np.seed = seed;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.strict_deterministic = strict;
    cfg.force = force;
    cfg.resume = resume;
    if (strict) thread_budget() = 1;

    if (gen->parsed()) cmd_generate(cfg);
    else if (tr->parsed()) cmd_train(cfg);
    else if (rec->parsed()) cmd_reconstruct(cfg);
    else if (ev->parsed()) cmd_evaluate(cfg);
    else if (ab->parsed()) cmd_ablate(cfg);
    else if (cmp->parsed()) cmd_compare(report_paths, compare_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
