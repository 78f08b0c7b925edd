#pragma once

// Data model for scattered field snapshots: file formats, train/test
// splitting, observation sampling, noise injection, normalization, and the
// analytic vortex-street generator used for synthetic benchmarks.

#include <cstdint>
#include <string>
#include <vector>

#include "recon/errors.hpp"
#include "recon/rng.hpp"

namespace recon {

// One time-instant field sample: M points, each a coordinate in d_x
// dimensions plus a value in d_v dimensions.
struct Snapshot {
  int d_x = 0;
  int d_v = 0;
  int index = 0;
  std::vector<double> coords;  // [M * d_x], row-major per point
  std::vector<double> values;  // [M * d_v]

  int num_points() const {
    return d_x > 0 ? static_cast<int>(coords.size()) / d_x : 0;
  }
  double coord(int i, int k) const { return coords[static_cast<size_t>(i) * d_x + k]; }
  double value(int i, int c) const { return values[static_cast<size_t>(i) * d_v + c]; }
  double& coord(int i, int k) { return coords[static_cast<size_t>(i) * d_x + k]; }
  double& value(int i, int c) { return values[static_cast<size_t>(i) * d_v + c]; }

  void validate(const std::string& context) const;
};

struct Dataset {
  int d_x = 0;
  int d_v = 0;
  std::vector<std::string> component_names;
  std::vector<Snapshot> snapshots;

  void validate() const;
};

// Index sets partitioning a snapshot's points into observed and query
// subsets. Both lists are sorted and disjoint.
struct ObservationSplit {
  std::vector<int> observed;
  std::vector<int> query;

  int num_observed() const { return static_cast<int>(observed.size()); }
  int num_query() const { return static_cast<int>(query.size()); }
  void validate(int num_points) const;
};

struct NormalizationStats {
  std::vector<double> coord_mean, coord_std;  // [d_x]
  std::vector<double> value_mean, value_std;  // [d_v]
};

struct NoiseSpec {
  double scale = 0.0;  // multiple of per-component training std
  uint64_t seed = 0;
};

// -- file formats -------------------------------------------------------------

// Manifest: JSON {"d_x", "d_v", "components", "snapshots": [relative paths]}.
// Snapshot file: CSV with header x0[,x1[,x2]],<components>, LF endings,
// decimal text that round-trips doubles bit-exactly.
Dataset load_dataset(const std::string& manifest_path);
void save_dataset(const Dataset& ds, const std::string& directory, bool force);
Snapshot load_snapshot_csv(const std::string& path, int d_x, int d_v, int index);
void save_snapshot_csv(const Snapshot& snap, const std::vector<std::string>& components,
                       const std::string& path);

// -- splitting and sampling ----------------------------------------------------

// First floor(fraction * N) snapshots become the training set, the remainder
// the test set; order is preserved.
std::pair<Dataset, Dataset> sequential_split(const Dataset& ds, double train_fraction);

// Greedy farthest-point sampling seeded by a random start point; observed
// gets m indices, query the complement. Deterministic given seed.
ObservationSplit sample_observations(const Snapshot& snap, int m, uint64_t seed);

// Restricts farthest-point sampling to a candidate subset, returning at most
// `m` of its indices (used to build coverage-preserving context subsets).
std::vector<int> farthest_point_subset(const Snapshot& snap,
                                       const std::vector<int>& candidates, int m,
                                       uint64_t seed);

// -- noise + normalization ------------------------------------------------------

// Adds N(0, (scale * train_std[c])^2) to every value entry; coordinates are
// untouched. Deterministic given spec.seed.
Snapshot add_noise(const Snapshot& snap, const NoiseSpec& spec,
                   const std::vector<double>& train_std);

// Pooled mean/std over all points of all snapshots; std clamped to 1e-12.
NormalizationStats compute_normalization(const Dataset& train);

Snapshot normalize(const Snapshot& snap, const NormalizationStats& stats);
Snapshot denormalize(const Snapshot& snap, const NormalizationStats& stats);

// -- synthetic vortex street -----------------------------------------------------

struct VortexStreetConfig {
  double x_min = 0.0, x_max = 12.0;
  double y_min = -3.0, y_max = 3.0;
  int points_per_snapshot = 5000;
  int num_snapshots = 100;
  double freestream = 1.0;       // U
  double circulation = 2.0;      // Gamma
  double core_radius = 0.35;     // r_c
  double spacing_x = 2.5;        // a, streamwise pair spacing
  double spacing_y = 1.0;        // b, row separation
  double advection_speed = 0.75; // downstream drift of the pattern
  double dt = 0.1;               // time between snapshots
  double street_origin = 0.0;    // x of pair 0 at t = 0 (auto when pairs == 0)
  int pairs = 0;                 // finite street length; 0 = auto-cover domain
  int window_pairs = 12;         // K nearest pairs per evaluation point
  bool shared_points = true;     // one point cloud reused across snapshots
  uint64_t seed = 1;
};

// Analytic evaluator: freestream plus two staggered rows of counter-rotating
// viscous-core vortices, advected downstream over time. Truncated to the
// window_pairs nearest pairs per evaluation point.
class VortexStreet {
 public:
  explicit VortexStreet(const VortexStreetConfig& cfg);

  // In-plane velocity at (x, y) and time t.
  void velocity(double x, double y, double t, double& u, double& v) const;
  // Surrogate pressure: -(u^2 + v^2 - U^2) / 2.
  double pressure(double u, double v) const;

  const VortexStreetConfig& config() const { return cfg_; }
  int pairs() const { return pairs_; }
  double street_origin() const { return origin_; }

 private:
  VortexStreetConfig cfg_;
  int pairs_ = 0;
  double origin_ = 0.0;
};

// Samples stratified-jittered points per snapshot and evaluates the analytic
// street at times index * dt. Components are (u, v, p); d_x = 2, d_v = 3.
Dataset generate_vortex_street(const VortexStreetConfig& cfg);

}  // namespace recon
