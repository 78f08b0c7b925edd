#pragma once

// Benchmark harness commands. Each function implements one CLI subcommand on
// top of a RunConfig; the thin binary in tools/ maps exceptions to exit
// codes. Tests call these directly.

#include <string>
#include <vector>

#include "recon/config.hpp"
#include "recon/metrics.hpp"

namespace recon {

struct MethodReport {
  std::string method;
  std::vector<SnapshotMetrics> per_snapshot;
  AggregateMetrics agg;
  bool has_spectrum = false;
  double spectrum_log_distance = 0.0;  // mean over snapshots, vs truth
  Spectrum mean_spectrum;
};

struct EvalSummary {
  std::vector<std::string> components;
  std::vector<MethodReport> methods;
};

struct AblateRow {
  double axis = 0.0;
  AggregateMetrics agg;
};

struct AblateResult {
  std::vector<AblateRow> density_rows;
  std::vector<AblateRow> noise_rows;
};

// generate: writes manifest + snapshot CSVs to [data].dir.
void cmd_generate(const RunConfig& cfg);

// train: writes checkpoint (atomically, after every epoch), loss-history CSV
// and a config echo under [output].dir.
void cmd_train(const RunConfig& cfg);

// reconstruct: writes one reconstructed CSV per test snapshot.
void cmd_reconstruct(const RunConfig& cfg);

// evaluate: per-method per-snapshot metrics plus aggregate tables
// (report.json / report.txt; spectra.csv when enabled).
EvalSummary cmd_evaluate(const RunConfig& cfg);

// ablate: observation-density and noise sweeps; resumable per grid point.
AblateResult cmd_ablate(const RunConfig& cfg);

// compare: merges evaluation reports into one table.
void cmd_compare(const std::vector<std::string>& report_paths,
                 const std::string& out_path);

// Rendering helpers (also used by compare).
std::string report_to_json_text(const EvalSummary& summary);
std::string report_to_table(const EvalSummary& summary);

}  // namespace recon
