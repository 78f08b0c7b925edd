#pragma once

// Quantitative evaluation: relative RMSE, R^2, kinetic-energy spectra, and
// mean +/- std aggregation across snapshots.

#include <string>
#include <vector>

#include "recon/errors.hpp"
#include "recon/field.hpp"

namespace recon {

struct RmseResult {
  double total = 0.0;
  std::vector<double> per_component;
};

// sqrt(sum (v - vhat)^2) / sqrt(sum v^2); per-component entries use only that
// column, total pools all entries. pred/truth are [N x d_v] row-major.
RmseResult relative_rmse(const std::vector<double>& pred,
                         const std::vector<double>& truth, int d_v,
                         const std::vector<std::string>& component_names);

// 1 - sum (v - vhat)^2 / sum (v - vbar)^2.
double r_squared(const std::vector<double>& pred, const std::vector<double>& truth);

struct Spectrum {
  std::vector<double> wavenumber;  // shell centers, cycles per domain length
  std::vector<double> energy;      // shell-summed kinetic energy
};

// Interpolates the selected velocity components onto a regular grid over the
// bounding box (local least-squares affine fits), applies a DFT per axis, and
// sums |u_hat|^2 / 2 over integer wavenumber shells.
Spectrum energy_spectrum(const std::vector<double>& coords,
                         const std::vector<double>& values, int d_x, int d_v,
                         const std::vector<int>& velocity_components, int grid);

Spectrum energy_spectrum(const Snapshot& snap,
                         const std::vector<int>& velocity_components, int grid);

// L2 distance between log-energies over the shells both spectra share;
// shells below `floor_energy` in either spectrum are skipped.
double spectrum_log_distance(const Spectrum& a, const Spectrum& b,
                             double floor_energy = 1e-300);

// Per-snapshot metric row.
struct SnapshotMetrics {
  int snapshot_index = 0;
  RmseResult rmse;
  std::vector<double> r2_per_component;  // optional; empty when not computed
};

struct AggregateMetrics {
  std::vector<std::string> component_names;
  std::vector<double> rmse_mean, rmse_std;  // per component
  double total_mean = 0.0, total_std = 0.0;
  std::vector<double> r2_mean, r2_std;  // per component; empty if unavailable
  int num_snapshots = 0;
};

// Unweighted mean and sample (n-1) standard deviation per metric.
AggregateMetrics aggregate(const std::vector<SnapshotMetrics>& rows,
                           const std::vector<std::string>& component_names);

}  // namespace recon
