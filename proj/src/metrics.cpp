#include "recon/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>

#include <Eigen/Dense>

namespace recon {

RmseResult relative_rmse(const std::vector<double>& pred,
                         const std::vector<double>& truth, int d_v,
                         const std::vector<std::string>& component_names) {
  if (pred.size() != truth.size() || pred.size() % static_cast<size_t>(d_v) != 0)
    throw DimensionError("relative_rmse: array sizes disagree");
  const size_t n = pred.size() / static_cast<size_t>(d_v);
  if (n == 0) throw DimensionError("relative_rmse: empty input");
  RmseResult out;
  out.per_component.resize(static_cast<size_t>(d_v));
  double sse_all = 0.0, sst_all = 0.0;
  for (int c = 0; c < d_v; ++c) {
    double sse = 0.0, sst = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double t = truth[i * d_v + c];
      const double r = pred[i * d_v + c] - t;
      sse += r * r;
      sst += t * t;
    }
    if (sst <= 0.0) {
      const std::string name = c < static_cast<int>(component_names.size())
                                   ? component_names[static_cast<size_t>(c)]
                                   : ("component " + std::to_string(c));
      throw NumericalError("relative_rmse: zero truth norm for " + name);
    }
    out.per_component[static_cast<size_t>(c)] = std::sqrt(sse) / std::sqrt(sst);
    sse_all += sse;
    sst_all += sst;
  }
  out.total = std::sqrt(sse_all) / std::sqrt(sst_all);
  return out;
}

double r_squared(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.size() != truth.size() || truth.empty())
    throw DimensionError("r_squared: array sizes disagree");
  double mean = 0.0;
  for (double t : truth) mean += t;
  mean /= static_cast<double>(truth.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
  }
  if (ss_tot <= 0.0) throw NumericalError("r_squared: truth has zero variance");
  return 1.0 - ss_res / ss_tot;
}

namespace {

// Value at a grid node from a weighted least-squares affine fit over the k
// nearest scattered points. Falls back to the nearest value when the normal
// equations are singular.
class LocalLinearInterpolator {
 public:
  LocalLinearInterpolator(const std::vector<double>& coords, int d_x,
                          const std::vector<double>& lo, const std::vector<double>& hi)
      : coords_(coords), d_x_(d_x), lo_(lo) {
    n_ = static_cast<int>(coords.size()) / d_x;
    // Bucket points on a coarse cell grid for neighbor queries.
    cells_per_axis_ = std::max(
        1, static_cast<int>(std::floor(std::pow(static_cast<double>(n_) / 2.0,
                                                1.0 / d_x))));
    cell_size_.resize(static_cast<size_t>(d_x));
    for (int k = 0; k < d_x; ++k) {
      const double span = std::max(hi[static_cast<size_t>(k)] - lo[static_cast<size_t>(k)],
                                   1e-300);
      cell_size_[static_cast<size_t>(k)] = span / cells_per_axis_;
    }
    int total_cells = 1;
    for (int k = 0; k < d_x; ++k) total_cells *= cells_per_axis_;
    buckets_.assign(static_cast<size_t>(total_cells), {});
    for (int i = 0; i < n_; ++i) buckets_[cell_of(i)].push_back(i);
  }

  // Indices of (at least) k nearest points to g, by expanding ring search.
  void nearest(const double* g, int k, std::vector<int>& out) const {
    out.clear();
    std::vector<int> cell(static_cast<size_t>(d_x_));
    for (int a = 0; a < d_x_; ++a) {
      int c = static_cast<int>((g[a] - lo_[static_cast<size_t>(a)]) /
                               cell_size_[static_cast<size_t>(a)]);
      cell[static_cast<size_t>(a)] = std::clamp(c, 0, cells_per_axis_ - 1);
    }
    for (int ring = 0; ring < cells_per_axis_; ++ring) {
      collect_ring(cell, ring, out);
      if (static_cast<int>(out.size()) >= k && ring >= 1) break;
    }
    std::sort(out.begin(), out.end(), [&](int a, int b) {
      return dist2(a, g) < dist2(b, g);
    });
    if (static_cast<int>(out.size()) > k) out.resize(static_cast<size_t>(k));
  }

  double dist2(int i, const double* g) const {
    double d2 = 0;
    for (int a = 0; a < d_x_; ++a) {
      const double d = coords_[static_cast<size_t>(i) * d_x_ + a] - g[a];
      d2 += d * d;
    }
    return d2;
  }

  const double* point(int i) const { return &coords_[static_cast<size_t>(i) * d_x_]; }

 private:
  size_t cell_of(int i) const {
    size_t idx = 0;
    for (int a = 0; a < d_x_; ++a) {
      int c = static_cast<int>((coords_[static_cast<size_t>(i) * d_x_ + a] -
                                lo_[static_cast<size_t>(a)]) /
                               cell_size_[static_cast<size_t>(a)]);
      c = std::clamp(c, 0, cells_per_axis_ - 1);
      idx = idx * static_cast<size_t>(cells_per_axis_) + static_cast<size_t>(c);
    }
    return idx;
  }

  void collect_ring(const std::vector<int>& center, int ring, std::vector<int>& out) const {
    std::vector<int> c(static_cast<size_t>(d_x_));
    collect_recursive(center, ring, 0, c, out);
  }

  void collect_recursive(const std::vector<int>& center, int ring, int axis,
                         std::vector<int>& c, std::vector<int>& out) const {
    if (axis == d_x_) {
      int cheb = 0;
      for (int a = 0; a < d_x_; ++a)
        cheb = std::max(cheb, std::abs(c[static_cast<size_t>(a)] -
                                       center[static_cast<size_t>(a)]));
      if (cheb != ring) return;
      size_t idx = 0;
      for (int a = 0; a < d_x_; ++a)
        idx = idx * static_cast<size_t>(cells_per_axis_) +
              static_cast<size_t>(c[static_cast<size_t>(a)]);
      const auto& bucket = buckets_[idx];
      out.insert(out.end(), bucket.begin(), bucket.end());
      return;
    }
    const int lo = std::max(0, center[static_cast<size_t>(axis)] - ring);
    const int hi = std::min(cells_per_axis_ - 1, center[static_cast<size_t>(axis)] + ring);
    for (int v = lo; v <= hi; ++v) {
      c[static_cast<size_t>(axis)] = v;
      collect_recursive(center, ring, axis + 1, c, out);
    }
  }

  const std::vector<double>& coords_;
  int d_x_;
  int n_ = 0;
  int cells_per_axis_ = 1;
  std::vector<double> lo_;
  std::vector<double> cell_size_;
  std::vector<std::vector<int>> buckets_;
};

// In-place DFT along one axis of a d-dimensional complex grid (naive O(G^2)
// per line; grids here are small).
void dft_axis(std::vector<std::complex<double>>& grid, const std::vector<int>& dims,
              int axis) {
  const int g = dims[static_cast<size_t>(axis)];
  int stride = 1;
  for (size_t a = axis + 1; a < dims.size(); ++a) stride *= dims[a];
  int lines = 1;
  for (size_t a = 0; a < dims.size(); ++a)
    if (static_cast<int>(a) != axis) lines *= dims[a];

  std::vector<std::complex<double>> twiddle(static_cast<size_t>(g) * g);
  constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
  for (int k = 0; k < g; ++k)
    for (int t = 0; t < g; ++t)
      twiddle[static_cast<size_t>(k) * g + t] =
          std::polar(1.0, -kTwoPi * k * t / g);

  std::vector<std::complex<double>> line(static_cast<size_t>(g));
  int outer_stride = stride * g;
  for (int l = 0; l < lines; ++l) {
    const int block = l / stride;
    const int offset = l % stride;
    const int base = block * outer_stride + offset;
    for (int t = 0; t < g; ++t)
      line[static_cast<size_t>(t)] = grid[static_cast<size_t>(base + t * stride)];
    for (int k = 0; k < g; ++k) {
      std::complex<double> acc(0, 0);
      const std::complex<double>* tw = &twiddle[static_cast<size_t>(k) * g];
      for (int t = 0; t < g; ++t) acc += tw[t] * line[static_cast<size_t>(t)];
      grid[static_cast<size_t>(base + k * stride)] = acc;
    }
  }
}

}  // namespace

Spectrum energy_spectrum(const std::vector<double>& coords,
                         const std::vector<double>& values, int d_x, int d_v,
                         const std::vector<int>& velocity_components, int grid) {
  if (d_x != 2 && d_x != 3)
    throw DimensionError("energy_spectrum: requires d_x in {2, 3}");
  const int n = static_cast<int>(coords.size()) / d_x;
  int cells = 1;
  for (int a = 0; a < d_x; ++a) cells *= grid;
  if (n < cells / 10)
    throw DataError("energy_spectrum: too few points for a " + std::to_string(grid) +
                    "-per-axis grid");
  std::vector<double> lo(static_cast<size_t>(d_x),
                         std::numeric_limits<double>::infinity());
  std::vector<double> hi(static_cast<size_t>(d_x),
                         -std::numeric_limits<double>::infinity());
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d_x; ++a) {
      lo[static_cast<size_t>(a)] = std::min(lo[static_cast<size_t>(a)],
                                            coords[static_cast<size_t>(i) * d_x + a]);
      hi[static_cast<size_t>(a)] = std::max(hi[static_cast<size_t>(a)],
                                            coords[static_cast<size_t>(i) * d_x + a]);
    }
  for (int a = 0; a < d_x; ++a)
    if (!(hi[static_cast<size_t>(a)] > lo[static_cast<size_t>(a)]))
      throw DataError("energy_spectrum: degenerate bounding box");

  LocalLinearInterpolator interp(coords, d_x, lo, hi);
  const int neighbors = 2 * (d_x + 1) + 4;

  std::vector<int> dims(static_cast<size_t>(d_x), grid);
  const int max_shell =
      static_cast<int>(std::lround(std::sqrt(static_cast<double>(d_x)) * grid / 2.0)) + 1;
  Spectrum spec;
  spec.wavenumber.resize(static_cast<size_t>(max_shell) + 1);
  spec.energy.assign(static_cast<size_t>(max_shell) + 1, 0.0);
  for (size_t k = 0; k < spec.wavenumber.size(); ++k)
    spec.wavenumber[k] = static_cast<double>(k);

  std::vector<std::complex<double>> field(static_cast<size_t>(cells));
  std::vector<int> nbr;
  std::vector<double> g(static_cast<size_t>(d_x));
  Eigen::MatrixXd A;
  Eigen::VectorXd rhs;

  for (int comp : velocity_components) {
    if (comp < 0 || comp >= d_v)
      throw DimensionError("energy_spectrum: velocity component out of range");
    // Interpolate the component onto the grid. Node j of axis a sits at
    // lo + (j + 0.5) / G * span so every node is interior.
    for (int cell = 0; cell < cells; ++cell) {
      int rem = cell;
      for (int a = d_x - 1; a >= 0; --a) {
        const int j = rem % grid;
        rem /= grid;
        g[static_cast<size_t>(a)] =
            lo[static_cast<size_t>(a)] +
            (j + 0.5) * (hi[static_cast<size_t>(a)] - lo[static_cast<size_t>(a)]) / grid;
      }
      interp.nearest(g.data(), neighbors, nbr);
      const int k = static_cast<int>(nbr.size());
      double est;
      if (k >= d_x + 1) {
        A.resize(k, d_x + 1);
        rhs.resize(k);
        double scale2 = std::max(interp.dist2(nbr[static_cast<size_t>(k - 1)], g.data()),
                                 1e-300);
        for (int r = 0; r < k; ++r) {
          const int pi = nbr[static_cast<size_t>(r)];
          const double w =
              std::exp(-interp.dist2(pi, g.data()) / scale2);
          A(r, 0) = w;
          for (int a = 0; a < d_x; ++a)
            A(r, a + 1) = w * (interp.point(pi)[a] - g[static_cast<size_t>(a)]);
          rhs(r) = w * values[static_cast<size_t>(pi) * d_v + comp];
        }
        Eigen::VectorXd sol =
            (A.transpose() * A)
                .ldlt()
                .solve(A.transpose() * rhs);
        est = sol(0);
        if (!std::isfinite(est))
          est = values[static_cast<size_t>(nbr[0]) * d_v + comp];
      } else {
        est = values[static_cast<size_t>(nbr[0]) * d_v + comp];
      }
      field[static_cast<size_t>(cell)] = est;
    }
    for (int a = 0; a < d_x; ++a) dft_axis(field, dims, a);
    // Shell binning; normalization chosen so the energies sum to the total
    // grid kinetic energy (|U|^2 / N per mode).
    const double norm = 1.0 / static_cast<double>(cells);
    for (int cell = 0; cell < cells; ++cell) {
      int rem = cell;
      double k2 = 0;
      for (int a = d_x - 1; a >= 0; --a) {
        int f = rem % grid;
        rem /= grid;
        if (f > grid / 2) f -= grid;
        k2 += static_cast<double>(f) * f;
      }
      const int shell = static_cast<int>(std::lround(std::sqrt(k2)));
      spec.energy[static_cast<size_t>(shell)] +=
          0.5 * std::norm(field[static_cast<size_t>(cell)]) * norm;
    }
  }
  return spec;
}

Spectrum energy_spectrum(const Snapshot& snap,
                         const std::vector<int>& velocity_components, int grid) {
  return energy_spectrum(snap.coords, snap.values, snap.d_x, snap.d_v,
                         velocity_components, grid);
}

double spectrum_log_distance(const Spectrum& a, const Spectrum& b, double floor_energy) {
  const size_t n = std::min(a.energy.size(), b.energy.size());
  double acc = 0.0;
  int used = 0;
  for (size_t k = 1; k < n; ++k) {  // skip the mean shell
    if (a.energy[k] <= floor_energy || b.energy[k] <= floor_energy) continue;
    const double d = std::log(a.energy[k]) - std::log(b.energy[k]);
    acc += d * d;
    ++used;
  }
  if (used == 0) return 0.0;
  return std::sqrt(acc);
}

AggregateMetrics aggregate(const std::vector<SnapshotMetrics>& rows,
                           const std::vector<std::string>& component_names) {
  if (rows.empty()) throw DataError("aggregate: needs at least one snapshot");
  const int d_v = static_cast<int>(rows.front().rmse.per_component.size());
  AggregateMetrics out;
  out.component_names = component_names;
  out.num_snapshots = static_cast<int>(rows.size());
  auto mean_std = [&](auto getter, double& mean, double& stdev) {
    double m = 0;
    for (const auto& r : rows) m += getter(r);
    m /= static_cast<double>(rows.size());
    double acc = 0;
    for (const auto& r : rows) {
      const double d = getter(r) - m;
      acc += d * d;
    }
    mean = m;
    stdev = rows.size() > 1
                ? std::sqrt(acc / static_cast<double>(rows.size() - 1))
                : 0.0;
  };
  out.rmse_mean.resize(static_cast<size_t>(d_v));
  out.rmse_std.resize(static_cast<size_t>(d_v));
  for (int c = 0; c < d_v; ++c) {
    mean_std([c](const SnapshotMetrics& r) {
      return r.rmse.per_component[static_cast<size_t>(c)];
    }, out.rmse_mean[static_cast<size_t>(c)], out.rmse_std[static_cast<size_t>(c)]);
  }
  mean_std([](const SnapshotMetrics& r) { return r.rmse.total; }, out.total_mean,
           out.total_std);
  const bool has_r2 = !rows.front().r2_per_component.empty();
  if (has_r2) {
    out.r2_mean.resize(static_cast<size_t>(d_v));
    out.r2_std.resize(static_cast<size_t>(d_v));
    for (int c = 0; c < d_v; ++c) {
      mean_std([c](const SnapshotMetrics& r) {
        return r.r2_per_component[static_cast<size_t>(c)];
      }, out.r2_mean[static_cast<size_t>(c)], out.r2_std[static_cast<size_t>(c)]);
    }
  }
  return out;
}

}  // namespace recon
