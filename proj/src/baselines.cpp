#include "recon/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "recon/rng.hpp"

namespace recon {

namespace {

double dist2(const Snapshot& snap, int a, int b) {
  double d2 = 0;
  for (int k = 0; k < snap.d_x; ++k) {
    const double d = snap.coord(a, k) - snap.coord(b, k);
    d2 += d * d;
  }
  return d2;
}

double dist2_to(const Snapshot& snap, int a, const double* q) {
  double d2 = 0;
  for (int k = 0; k < snap.d_x; ++k) {
    const double d = snap.coord(a, k) - q[k];
    d2 += d * d;
  }
  return d2;
}

int nearest_observed(const Snapshot& snap, const ObservationSplit& split, int query) {
  int best = split.observed.front();
  double best_d2 = dist2(snap, query, best);
  for (int o : split.observed) {
    const double d2 = dist2(snap, query, o);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = o;
    }
  }
  return best;
}

// Thin-plate kernel r^2 log r (0 at r = 0).
double tps_kernel(double r2) {
  if (r2 <= 0.0) return 0.0;
  return 0.5 * r2 * std::log(r2);  // r^2 log r = r^2 * log(r^2) / 2
}

}  // namespace

std::vector<double> rbf_reconstruct(const Snapshot& snap, const ObservationSplit& split,
                                    const RbfConfig& cfg, BaselineDiagnostics* diag) {
  split.validate(snap.num_points());
  const int m = split.num_observed();
  const int n = split.num_query();
  const int d_x = snap.d_x;
  const int d_v = snap.d_v;
  std::vector<double> out(static_cast<size_t>(n) * d_v, 0.0);

  // Too few points to anchor the affine tail: nearest neighbor everywhere.
  if (m < d_x + 2) {
    if (diag) diag->fallbacks += n;
    for (int qi = 0; qi < n; ++qi) {
      const int nb = nearest_observed(snap, split, split.query[static_cast<size_t>(qi)]);
      for (int c = 0; c < d_v; ++c)
        out[static_cast<size_t>(qi) * d_v + c] = snap.value(nb, c);
    }
    return out;
  }

  const int k = std::min(cfg.neighbors, m);
  const int poly = d_x + 1;
  const int sys = k + poly;
  std::vector<int> order(static_cast<size_t>(m));
  Eigen::MatrixXd A(sys, sys);
  Eigen::MatrixXd rhs(sys, d_v);

  for (int qi = 0; qi < n; ++qi) {
    const int qpoint = split.query[static_cast<size_t>(qi)];
    const double* q = &snap.coords[static_cast<size_t>(qpoint) * d_x];
    // k nearest observed neighbors of this query
    for (int i = 0; i < m; ++i) order[static_cast<size_t>(i)] = split.observed[static_cast<size_t>(i)];
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int a, int b) { return dist2_to(snap, a, q) < dist2_to(snap, b, q); });

    A.setZero();
    rhs.setZero();
    for (int i = 0; i < k; ++i) {
      const int pi = order[static_cast<size_t>(i)];
      for (int j = 0; j <= i; ++j) {
        const int pj = order[static_cast<size_t>(j)];
        const double v = tps_kernel(dist2(snap, pi, pj));
        A(i, j) = v;
        A(j, i) = v;
      }
      A(i, i) += cfg.smoothing;
      A(i, k) = 1.0;
      A(k, i) = 1.0;
      for (int a = 0; a < d_x; ++a) {
        A(i, k + 1 + a) = snap.coord(pi, a);
        A(k + 1 + a, i) = snap.coord(pi, a);
      }
      for (int c = 0; c < d_v; ++c) rhs(i, c) = snap.value(pi, c);
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
    bool ok = lu.isInvertible();
    Eigen::MatrixXd sol;
    if (ok) {
      sol = lu.solve(rhs);
      ok = sol.allFinite();
    }
    if (!ok) {
      if (diag) diag->fallbacks += 1;
      const int nb = nearest_observed(snap, split, qpoint);
      for (int c = 0; c < d_v; ++c)
        out[static_cast<size_t>(qi) * d_v + c] = snap.value(nb, c);
      continue;
    }
    for (int c = 0; c < d_v; ++c) {
      double acc = sol(k, c);
      for (int a = 0; a < d_x; ++a) acc += sol(k + 1 + a, c) * q[a];
      for (int i = 0; i < k; ++i) {
        const int pi = order[static_cast<size_t>(i)];
        acc += sol(i, c) * tps_kernel(dist2_to(snap, pi, q));
      }
      out[static_cast<size_t>(qi) * d_v + c] = acc;
    }
  }
  return out;
}

std::vector<double> kriging_reconstruct(const Snapshot& snap,
                                        const ObservationSplit& split,
                                        const KrigingConfig& cfg, uint64_t seed,
                                        BaselineDiagnostics* diag) {
  split.validate(snap.num_points());
  const int n = split.num_query();
  const int d_v = snap.d_v;
  std::vector<double> out(static_cast<size_t>(n) * d_v, 0.0);

  // One subsample per snapshot, shared across output components.
  Rng rng(seed);
  std::vector<int> subset =
      rng.sample_without_replacement(split.observed, std::min(cfg.max_points,
                                                              split.num_observed()));
  std::sort(subset.begin(), subset.end());
  const int ns = static_cast<int>(subset.size());

  // Per-component standardization of the target.
  std::vector<double> mean(static_cast<size_t>(d_v), 0.0);
  std::vector<double> stdev(static_cast<size_t>(d_v), 1.0);
  for (int c = 0; c < d_v; ++c) {
    double mu = 0;
    for (int i : subset) mu += snap.value(i, c);
    mu /= ns;
    double var = 0;
    for (int i : subset) var += (snap.value(i, c) - mu) * (snap.value(i, c) - mu);
    mean[static_cast<size_t>(c)] = mu;
    if (cfg.normalize_target)
      stdev[static_cast<size_t>(c)] = std::max(std::sqrt(var / ns), 1e-12);
  }

  const double inv_2l2 = 1.0 / (2.0 * cfg.length_scale * cfg.length_scale);
  Eigen::MatrixXd K(ns, ns);
  for (int i = 0; i < ns; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double v = std::exp(-dist2(snap, subset[static_cast<size_t>(i)],
                                       subset[static_cast<size_t>(j)]) *
                                inv_2l2);
      K(i, j) = v;
      K(j, i) = v;
    }
  }

  Eigen::LLT<Eigen::MatrixXd> llt;
  double jitter = cfg.jitter;
  bool ok = false;
  while (jitter <= 1e-2 + 1e-15) {
    Eigen::MatrixXd Kj = K;
    Kj.diagonal().array() += cfg.noise + jitter;
    llt.compute(Kj);
    if (llt.info() == Eigen::Success) {
      ok = true;
      break;
    }
    jitter *= 10.0;
  }
  if (!ok) {
    if (diag) diag->fallbacks += n;
    for (int qi = 0; qi < n; ++qi) {
      const int nb = nearest_observed(snap, split, split.query[static_cast<size_t>(qi)]);
      for (int c = 0; c < d_v; ++c)
        out[static_cast<size_t>(qi) * d_v + c] = snap.value(nb, c);
    }
    return out;
  }

  Eigen::MatrixXd y(ns, d_v);
  for (int i = 0; i < ns; ++i)
    for (int c = 0; c < d_v; ++c)
      y(i, c) = (snap.value(subset[static_cast<size_t>(i)], c) -
                 mean[static_cast<size_t>(c)]) /
                stdev[static_cast<size_t>(c)];
  Eigen::MatrixXd alpha = llt.solve(y);

  Eigen::VectorXd kstar(ns);
  for (int qi = 0; qi < n; ++qi) {
    const int qpoint = split.query[static_cast<size_t>(qi)];
    const double* q = &snap.coords[static_cast<size_t>(qpoint) * snap.d_x];
    for (int i = 0; i < ns; ++i)
      kstar(i) = std::exp(-dist2_to(snap, subset[static_cast<size_t>(i)], q) * inv_2l2);
    for (int c = 0; c < d_v; ++c)
      out[static_cast<size_t>(qi) * d_v + c] =
          kstar.dot(alpha.col(c)) * stdev[static_cast<size_t>(c)] +
          mean[static_cast<size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// gappy POD

GappyPodModel gappy_pod_fit(const Dataset& train, double energy_threshold) {
  if (train.snapshots.size() < 2)
    throw DataError("gappy_pod_fit: needs at least 2 training snapshots");
  if (!(energy_threshold > 0.0 && energy_threshold <= 1.0))
    throw ConfigError("gappy_pod_fit: energy threshold must lie in (0, 1]");
  const Snapshot& first = train.snapshots.front();
  for (const auto& s : train.snapshots)
    if (s.coords != first.coords)
      throw DataError("Gappy POD requires canonical points shared by all training snapshots");

  GappyPodModel model;
  model.d_x = first.d_x;
  model.d_v = first.d_v;
  model.canonical_coords = first.coords;
  const int dim = static_cast<int>(first.values.size());
  const int nt = static_cast<int>(train.snapshots.size());

  model.mean_field.assign(static_cast<size_t>(dim), 0.0);
  for (const auto& s : train.snapshots)
    for (int i = 0; i < dim; ++i) model.mean_field[static_cast<size_t>(i)] += s.values[static_cast<size_t>(i)];
  for (auto& v : model.mean_field) v /= nt;

  Eigen::MatrixXd centered(dim, nt);
  for (int t = 0; t < nt; ++t)
    for (int i = 0; i < dim; ++i)
      centered(i, t) = train.snapshots[static_cast<size_t>(t)].values[static_cast<size_t>(i)] -
                       model.mean_field[static_cast<size_t>(i)];

  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU);
  const Eigen::VectorXd& sv = svd.singularValues();
  double total = 0;
  for (int i = 0; i < sv.size(); ++i) total += sv(i) * sv(i);
  int rank = 0;
  if (total > 0) {
    const double cutoff = sv(0) * 1e-12;
    double cum = 0;
    for (int i = 0; i < sv.size(); ++i) {
      if (sv(i) <= cutoff) break;
      cum += sv(i) * sv(i);
      rank = i + 1;
      if (cum >= energy_threshold * total * (1.0 - 1e-12)) break;
    }
  }
  model.rank = rank;
  model.singular_values.assign(sv.data(), sv.data() + sv.size());
  model.modes.resize(static_cast<size_t>(dim) * rank);
  for (int r = 0; r < rank; ++r)
    for (int i = 0; i < dim; ++i)
      model.modes[static_cast<size_t>(r) * dim + i] = svd.matrixU()(i, r);
  return model;
}

std::vector<double> gappy_pod_predict(const GappyPodModel& model, const Snapshot& snap,
                                      const ObservationSplit& split,
                                      BaselineDiagnostics* diag) {
  split.validate(snap.num_points());
  if (snap.d_v != model.d_v || snap.d_x != model.d_x)
    throw DataError("gappy_pod_predict: snapshot dimensions do not match model");
  const int mc = model.canonical_points();
  const int d_v = model.d_v;
  const int r = model.rank;

  // Nearest-neighbor match of observed points onto the canonical set.
  auto match = [&](int point) {
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < mc; ++i) {
      double d2 = 0;
      for (int k = 0; k < model.d_x; ++k) {
        const double d = snap.coord(point, k) -
                         model.canonical_coords[static_cast<size_t>(i) * model.d_x + k];
        d2 += d * d;
      }
      if (d2 < best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
    return best;
  };

  const int m = split.num_observed();
  Eigen::VectorXd coeff = Eigen::VectorXd::Zero(std::max(r, 1));
  if (r > 0) {
    Eigen::MatrixXd A(m * d_v, r);
    Eigen::VectorXd b(m * d_v);
    for (int i = 0; i < m; ++i) {
      const int point = split.observed[static_cast<size_t>(i)];
      const int row0 = match(point) * d_v;
      for (int c = 0; c < d_v; ++c) {
        b(i * d_v + c) = snap.value(point, c) -
                         model.mean_field[static_cast<size_t>(row0 + c)];
        for (int k = 0; k < r; ++k)
          A(i * d_v + c, k) =
              model.modes[static_cast<size_t>(k) * (mc * d_v) + row0 + c];
      }
    }
    if (m * d_v < r && diag) diag->least_norm_solves += 1;
    // SVD solve gives the least-squares solution, and the least-norm one
    // when the system is underdetermined.
    coeff = A.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(b);
  }

  const int n = split.num_query();
  std::vector<double> out(static_cast<size_t>(n) * d_v, 0.0);
  for (int qi = 0; qi < n; ++qi) {
    const int point = split.query[static_cast<size_t>(qi)];
    const int row0 = match(point) * d_v;
    for (int c = 0; c < d_v; ++c) {
      double acc = model.mean_field[static_cast<size_t>(row0 + c)];
      for (int k = 0; k < r; ++k)
        acc += coeff(k) * model.modes[static_cast<size_t>(k) * (mc * d_v) + row0 + c];
      out[static_cast<size_t>(qi) * d_v + c] = acc;
    }
  }
  return out;
}

}  // namespace recon
