#pragma once

// Classical reconstruction baselines: local thin-plate-spline interpolation,
// Gaussian-process kriging, and gappy proper orthogonal decomposition. All
// linear algebra runs in double precision.

#include <cstdint>
#include <vector>

#include "recon/field.hpp"

namespace recon {

struct RbfConfig {
  int neighbors = 128;      // local system size per query
  double smoothing = 1e-8;  // Tikhonov term on the kernel diagonal
};

struct KrigingConfig {
  double length_scale = 1.0;
  double noise = 1e-6;
  double jitter = 1e-6;  // escalates x10 up to 1e-2 before falling back
  int max_points = 512;
  bool normalize_target = true;
};

struct GappyPodConfig {
  double energy_threshold = 0.95;
};

// Counts of queries (RBF) or snapshots/components (kriging, POD) that fell
// back to nearest-neighbor or least-norm handling.
struct BaselineDiagnostics {
  int fallbacks = 0;
  int least_norm_solves = 0;
};

// Thin-plate-spline interpolation over the k nearest observed neighbors of
// each query, with an affine polynomial tail. Returns values at query points
// in split.query order, [n x d_v] row-major.
std::vector<double> rbf_reconstruct(const Snapshot& snap, const ObservationSplit& split,
                                    const RbfConfig& cfg,
                                    BaselineDiagnostics* diag = nullptr);

// Gaussian-process posterior mean with a squared-exponential kernel plus
// white noise; at most max_points observed points are subsampled with `seed`
// (callers pass the snapshot index).
std::vector<double> kriging_reconstruct(const Snapshot& snap,
                                        const ObservationSplit& split,
                                        const KrigingConfig& cfg, uint64_t seed,
                                        BaselineDiagnostics* diag = nullptr);

struct GappyPodModel {
  int d_v = 0;
  std::vector<double> canonical_coords;  // [M_c x d_x]
  int d_x = 0;
  std::vector<double> mean_field;  // [M_c * d_v]
  std::vector<double> modes;       // [(M_c * d_v) x r], column-major
  std::vector<double> singular_values;
  int rank = 0;

  int canonical_points() const {
    return d_x > 0 ? static_cast<int>(canonical_coords.size()) / d_x : 0;
  }
};

// Builds the mean field and POD modes from training snapshots that share one
// canonical point set; keeps the smallest rank whose cumulative squared
// singular values reach the energy threshold.
GappyPodModel gappy_pod_fit(const Dataset& train, double energy_threshold = 0.95);

// Least-squares modal coefficients from the observed entries (nearest-
// neighbor matched to canonical points); returns values at query points in
// split.query order.
std::vector<double> gappy_pod_predict(const GappyPodModel& model, const Snapshot& snap,
                                      const ObservationSplit& split,
                                      BaselineDiagnostics* diag = nullptr);

}  // namespace recon
