#pragma once

// Run configuration: a plain-text key/value file with [sections], overridable
// by command-line flags. Unknown sections or keys are hard errors so typos in
// sweep configs fail fast.

#include <string>
#include <vector>

#include "recon/baselines.hpp"
#include "recon/field.hpp"
#include "recon/neural_process.hpp"
#include "recon/rformer.hpp"

namespace recon {

struct RunConfig {
  // [data]
  std::string data_dir = "data/vortex";
  double train_fraction = 0.8;

  // [generate]
  VortexStreetConfig generate;

  // [model]
  ModelConfig model;

  // [train]
  int epochs = 100;
  int batch_size = 16;
  int obs_per_sequence = 256;
  int query_per_sequence = 256;
  double learning_rate = 0.001;
  uint64_t seed = 1;
  int steps_per_epoch = 0;  // 0 = auto

  // [observe]
  double density = 0.02;        // observed fraction of points per snapshot
  double noise_scale = 0.0;     // multiples of per-component training std
  int eval_obs_budget = 512;    // context cap at evaluation time
  int chunk = 512;              // query chunk budget for reconstruction

  // [rbf]
  RbfConfig rbf;
  // [kriging]
  KrigingConfig kriging;
  // [gappy_pod]
  GappyPodConfig gappy_pod;
  // [np]
  NpConfig np;
  int cnp_epochs = 10000;
  int tnp_epochs = 1000;

  // [evaluate]
  std::vector<std::string> methods = {"rformer", "interpolation", "kriging",
                                      "gappy_pod"};
  std::string checkpoint;  // empty = <out_dir>/checkpoint.rck
  bool spectrum = false;
  int spectrum_grid = 64;
  bool dump_fields = false;

  // [ablate]
  std::vector<double> densities = {0.01, 0.02, 0.05, 0.10, 0.25};
  std::vector<double> noise_scales = {0.01, 0.1, 0.25, 0.5, 1.0};
  int ablate_epochs = 0;  // 0 = use [train] epochs

  // [output]
  std::string out_dir = "out";

  // global flags (not file keys)
  bool strict_deterministic = false;
  bool force = false;
  bool resume = false;

  std::string checkpoint_path() const;
};

// Parses the file and applies it over the defaults. Unknown keys throw
// ConfigError naming the offender.
RunConfig load_run_config(const std::string& path);
void apply_config_text(RunConfig& cfg, const std::string& text,
                       const std::string& origin);

// Effective-config echo, parseable by load_run_config.
std::string config_to_text(const RunConfig& cfg);

}  // namespace recon
