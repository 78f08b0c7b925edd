#include "recon/field.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "recon/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace recon {

// ---------------------------------------------------------------------------
// validation

void Snapshot::validate(const std::string& context) const {
  if (d_x < 1 || d_x > 3) throw DataError(context + ": d_x must be 1, 2 or 3");
  if (d_v < 1) throw DataError(context + ": d_v must be >= 1");
  const int m = num_points();
  if (m < 2) throw DataError(context + ": M >= 2 violated");
  if (static_cast<int>(coords.size()) != m * d_x ||
      static_cast<int>(values.size()) != m * d_v)
    throw DataError(context + ": ragged snapshot arrays");
  for (double c : coords)
    if (!std::isfinite(c)) throw DataError(context + ": non-finite coordinate");
  for (double v : values)
    if (!std::isfinite(v)) throw DataError(context + ": non-finite value");
}

void Dataset::validate() const {
  if (d_v != static_cast<int>(component_names.size()))
    throw DataError("dataset: component name count does not match d_v");
  int prev = -1;
  for (const auto& s : snapshots) {
    if (s.d_x != d_x || s.d_v != d_v)
      throw DataError("dataset: snapshot dimensions disagree");
    if (s.index <= prev) throw DataError("dataset: snapshot indices not sorted/unique");
    prev = s.index;
    s.validate("snapshot " + std::to_string(s.index));
  }
}

void ObservationSplit::validate(int num_points) const {
  if (observed.empty()) throw DataError("split: m >= 1 violated");
  if (query.empty()) throw DataError("split: n >= 1 violated");
  auto check_sorted = [num_points](const std::vector<int>& v, const char* name) {
    int prev = -1;
    for (int i : v) {
      if (i <= prev || i < 0 || i >= num_points)
        throw DataError(std::string("split: ") + name + " not sorted/unique/in-range");
      prev = i;
    }
  };
  check_sorted(observed, "observed");
  check_sorted(query, "query");
  std::vector<int> inter;
  std::set_intersection(observed.begin(), observed.end(), query.begin(), query.end(),
                        std::back_inserter(inter));
  if (!inter.empty()) throw DataError("split: observed and query overlap");
}

// ---------------------------------------------------------------------------
// CSV + manifest

Snapshot load_snapshot_csv(const std::string& path, int d_x, int d_v, int index) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open snapshot file: " + path);
  Snapshot snap;
  snap.d_x = d_x;
  snap.d_v = d_v;
  snap.index = index;
  std::string line;
  int line_no = 0;
  const int cols = d_x + d_v;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) continue;  // header
    std::vector<double> row;
    row.reserve(static_cast<size_t>(cols));
    const char* p = line.c_str();
    while (*p) {
      char* end = nullptr;
      const double v = std::strtod(p, &end);
      if (end == p)
        throw DataError(path + ":" + std::to_string(line_no) + ": malformed row");
      row.push_back(v);
      p = end;
      if (*p == ',') ++p;
      else if (*p != '\0')
        throw DataError(path + ":" + std::to_string(line_no) + ": malformed row");
    }
    if (static_cast<int>(row.size()) != cols)
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": expected " + std::to_string(cols) + " columns, got " +
                      std::to_string(row.size()));
    for (double v : row)
      if (!std::isfinite(v))
        throw DataError(path + ":" + std::to_string(line_no) + ": non-finite entry");
    for (int k = 0; k < d_x; ++k) snap.coords.push_back(row[static_cast<size_t>(k)]);
    for (int c = 0; c < d_v; ++c)
      snap.values.push_back(row[static_cast<size_t>(d_x + c)]);
  }
  snap.validate(path);
  return snap;
}

void save_snapshot_csv(const Snapshot& snap, const std::vector<std::string>& components,
                       const std::string& path) {
  std::ostringstream out;
  for (int k = 0; k < snap.d_x; ++k) out << (k ? "," : "") << "x" << k;
  for (const auto& name : components) out << "," << name;
  out << "\n";
  const int m = snap.num_points();
  for (int i = 0; i < m; ++i) {
    for (int k = 0; k < snap.d_x; ++k)
      out << (k ? "," : "") << format_double(snap.coord(i, k));
    for (int c = 0; c < snap.d_v; ++c) out << "," << format_double(snap.value(i, c));
    out << "\n";
  }
  atomic_write_file(path, out.str());
}

Dataset load_dataset(const std::string& manifest_path) {
  json j;
  try {
    j = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.d_x = j.at("d_x").get<int>();
    ds.d_v = j.at("d_v").get<int>();
    ds.component_names = j.at("components").get<std::vector<std::string>>();
    const auto files = j.at("snapshots").get<std::vector<std::string>>();
    const fs::path base = fs::path(manifest_path).parent_path();
    ds.snapshots.reserve(files.size());
    int index = 0;
    for (const auto& rel : files) {
      ds.snapshots.push_back(
          load_snapshot_csv((base / rel).string(), ds.d_x, ds.d_v, index));
      ++index;
    }
  } catch (const json::exception& e) {
    throw DataError("manifest " + manifest_path + ": " + e.what());
  }
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& directory, bool force) {
  ds.validate();
  const fs::path dir(directory);
  if (fs::exists(dir / "manifest.json") && !force)
    throw DataError("output dataset already exists (use --force): " + directory);
  ensure_directory(directory);
  json manifest;
  manifest["d_x"] = ds.d_x;
  manifest["d_v"] = ds.d_v;
  manifest["components"] = ds.component_names;
  std::vector<std::string> files;
  for (const auto& snap : ds.snapshots) {
    char name[32];
    std::snprintf(name, sizeof(name), "snap_%04d.csv", snap.index);
    files.emplace_back(name);
    save_snapshot_csv(snap, ds.component_names, (dir / name).string());
  }
  manifest["snapshots"] = files;
  atomic_write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// splitting + sampling

std::pair<Dataset, Dataset> sequential_split(const Dataset& ds, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must lie in (0, 1)");
  const int n = static_cast<int>(ds.snapshots.size());
  const int n_train = static_cast<int>(std::floor(train_fraction * n));
  if (n_train < 1 || n_train >= n)
    throw DataError("sequential_split: a side would be empty");
  Dataset train, test;
  train.d_x = test.d_x = ds.d_x;
  train.d_v = test.d_v = ds.d_v;
  train.component_names = test.component_names = ds.component_names;
  train.snapshots.assign(ds.snapshots.begin(), ds.snapshots.begin() + n_train);
  test.snapshots.assign(ds.snapshots.begin() + n_train, ds.snapshots.end());
  return {std::move(train), std::move(test)};
}

namespace {

// Greedy farthest-point selection over `candidates`, starting from a random
// candidate. Returns selected candidate indices (into the snapshot).
std::vector<int> fps_select(const Snapshot& snap, const std::vector<int>& candidates,
                            int m, uint64_t seed) {
  const int n = static_cast<int>(candidates.size());
  Rng rng(seed);
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(m));
  std::vector<double> min_d2(static_cast<size_t>(n),
                             std::numeric_limits<double>::infinity());
  auto dist2 = [&](int a, int b) {
    double d2 = 0;
    for (int k = 0; k < snap.d_x; ++k) {
      const double d = snap.coord(a, k) - snap.coord(b, k);
      d2 += d * d;
    }
    return d2;
  };
  int current = rng.uniform_int(n);
  picked.push_back(candidates[static_cast<size_t>(current)]);
  for (int round = 1; round < m; ++round) {
    int best = -1;
    double best_d2 = -1.0;
    for (int j = 0; j < n; ++j) {
      const double d2 = dist2(candidates[static_cast<size_t>(j)],
                              candidates[static_cast<size_t>(current)]);
      if (d2 < min_d2[static_cast<size_t>(j)]) min_d2[static_cast<size_t>(j)] = d2;
      if (min_d2[static_cast<size_t>(j)] > best_d2) {
        best_d2 = min_d2[static_cast<size_t>(j)];
        best = j;
      }
    }
    current = best;
    picked.push_back(candidates[static_cast<size_t>(current)]);
    min_d2[static_cast<size_t>(current)] = -1.0;  // never re-selected
  }
  return picked;
}

}  // namespace

ObservationSplit sample_observations(const Snapshot& snap, int m, uint64_t seed) {
  const int total = snap.num_points();
  if (m < 1 || m >= total)
    throw DataError("sample_observations: m must satisfy 1 <= m < M (m=" +
                    std::to_string(m) + ", M=" + std::to_string(total) + ")");
  std::vector<int> all(static_cast<size_t>(total));
  for (int i = 0; i < total; ++i) all[static_cast<size_t>(i)] = i;
  std::vector<int> picked = fps_select(snap, all, m, seed);
  ObservationSplit split;
  split.observed = std::move(picked);
  std::sort(split.observed.begin(), split.observed.end());
  std::vector<uint8_t> is_obs(static_cast<size_t>(total), 0);
  for (int i : split.observed) is_obs[static_cast<size_t>(i)] = 1;
  for (int i = 0; i < total; ++i)
    if (!is_obs[static_cast<size_t>(i)]) split.query.push_back(i);
  split.validate(total);
  return split;
}

std::vector<int> farthest_point_subset(const Snapshot& snap,
                                       const std::vector<int>& candidates, int m,
                                       uint64_t seed) {
  if (candidates.empty()) throw DataError("farthest_point_subset: empty candidates");
  if (m >= static_cast<int>(candidates.size())) {
    std::vector<int> all = candidates;
    std::sort(all.begin(), all.end());
    return all;
  }
  std::vector<int> picked = fps_select(snap, candidates, m, seed);
  std::sort(picked.begin(), picked.end());
  return picked;
}

// ---------------------------------------------------------------------------
// noise + normalization

Snapshot add_noise(const Snapshot& snap, const NoiseSpec& spec,
                   const std::vector<double>& train_std) {
  if (spec.scale < 0) throw ConfigError("noise scale must be >= 0");
  if (static_cast<int>(train_std.size()) != snap.d_v)
    throw DataError("add_noise: train_std size does not match d_v");
  for (double s : train_std)
    if (!(s > 0)) throw DataError("add_noise: train_std must be positive");
  Snapshot out = snap;
  if (spec.scale == 0.0) return out;
  Rng rng(spec.seed);
  const int m = snap.num_points();
  for (int i = 0; i < m; ++i)
    for (int c = 0; c < snap.d_v; ++c)
      out.value(i, c) += rng.normal() * spec.scale * train_std[static_cast<size_t>(c)];
  return out;
}

NormalizationStats compute_normalization(const Dataset& train) {
  if (train.snapshots.empty())
    throw DataError("compute_normalization: empty training set");
  NormalizationStats st;
  st.coord_mean.assign(static_cast<size_t>(train.d_x), 0.0);
  st.coord_std.assign(static_cast<size_t>(train.d_x), 0.0);
  st.value_mean.assign(static_cast<size_t>(train.d_v), 0.0);
  st.value_std.assign(static_cast<size_t>(train.d_v), 0.0);
  int64_t n = 0;
  for (const auto& snap : train.snapshots) {
    const int m = snap.num_points();
    n += m;
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < train.d_x; ++k)
        st.coord_mean[static_cast<size_t>(k)] += snap.coord(i, k);
      for (int c = 0; c < train.d_v; ++c)
        st.value_mean[static_cast<size_t>(c)] += snap.value(i, c);
    }
  }
  for (auto& v : st.coord_mean) v /= static_cast<double>(n);
  for (auto& v : st.value_mean) v /= static_cast<double>(n);
  for (const auto& snap : train.snapshots) {
    const int m = snap.num_points();
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < train.d_x; ++k) {
        const double d = snap.coord(i, k) - st.coord_mean[static_cast<size_t>(k)];
        st.coord_std[static_cast<size_t>(k)] += d * d;
      }
      for (int c = 0; c < train.d_v; ++c) {
        const double d = snap.value(i, c) - st.value_mean[static_cast<size_t>(c)];
        st.value_std[static_cast<size_t>(c)] += d * d;
      }
    }
  }
  for (auto& v : st.coord_std)
    v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-12);
  for (auto& v : st.value_std)
    v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-12);
  return st;
}

Snapshot normalize(const Snapshot& snap, const NormalizationStats& stats) {
  Snapshot out = snap;
  const int m = snap.num_points();
  for (int i = 0; i < m; ++i) {
    for (int k = 0; k < snap.d_x; ++k)
      out.coord(i, k) = (snap.coord(i, k) - stats.coord_mean[static_cast<size_t>(k)]) /
                        stats.coord_std[static_cast<size_t>(k)];
    for (int c = 0; c < snap.d_v; ++c)
      out.value(i, c) = (snap.value(i, c) - stats.value_mean[static_cast<size_t>(c)]) /
                        stats.value_std[static_cast<size_t>(c)];
  }
  return out;
}

Snapshot denormalize(const Snapshot& snap, const NormalizationStats& stats) {
  Snapshot out = snap;
  const int m = snap.num_points();
  for (int i = 0; i < m; ++i) {
    for (int k = 0; k < snap.d_x; ++k)
      out.coord(i, k) = snap.coord(i, k) * stats.coord_std[static_cast<size_t>(k)] +
                        stats.coord_mean[static_cast<size_t>(k)];
    for (int c = 0; c < snap.d_v; ++c)
      out.value(i, c) = snap.value(i, c) * stats.value_std[static_cast<size_t>(c)] +
                        stats.value_mean[static_cast<size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// vortex street

VortexStreet::VortexStreet(const VortexStreetConfig& cfg) : cfg_(cfg) {
  if (!(cfg.core_radius > 0)) throw ConfigError("core_radius must be positive");
  if (!(cfg.freestream > 0)) throw ConfigError("freestream must be positive");
  if (!(cfg.spacing_x > 0) || !(cfg.spacing_y > 0))
    throw ConfigError("street spacing must be positive");
  if (!(cfg.x_min < cfg.x_max) || !(cfg.y_min < cfg.y_max))
    throw ConfigError("domain box must satisfy min < max");
  if (cfg.window_pairs < 1) throw ConfigError("window_pairs must be >= 1");
  if (cfg.pairs > 0) {
    pairs_ = cfg.pairs;
    origin_ = cfg.street_origin;
  } else {
    // Auto-size the street so the window never clips inside the domain at
    // any snapshot time: extend (window + 2) pairs beyond both ends.
    const double t_max = cfg.dt * std::max(0, cfg.num_snapshots - 1);
    const double margin = (cfg.window_pairs + 2) * cfg.spacing_x;
    const double lo = cfg.x_min - margin - std::max(0.0, cfg.advection_speed * t_max);
    const double hi = cfg.x_max + margin;
    origin_ = lo;
    pairs_ = static_cast<int>(std::ceil((hi - lo) / cfg.spacing_x)) + 1;
  }
}

void VortexStreet::velocity(double x, double y, double t, double& u, double& v) const {
  const double a = cfg_.spacing_x;
  const double b = cfg_.spacing_y;
  const double rc2 = cfg_.core_radius * cfg_.core_radius;
  const double gamma = cfg_.circulation;
  const double drift = cfg_.advection_speed * t;
  u = cfg_.freestream;
  v = 0.0;
  // Pair index nearest to the evaluation point, in street coordinates.
  const double xi = x - origin_ - drift;
  const int i0 = static_cast<int>(std::lround(xi / a));
  const int lo = std::max(0, i0 - cfg_.window_pairs);
  const int hi = std::min(pairs_ - 1, i0 + cfg_.window_pairs);
  constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
  auto accumulate = [&](double cx, double cy, double sign) {
    const double dx = x - cx;
    const double dy = y - cy;
    const double r2 = dx * dx + dy * dy;
    if (r2 == 0.0) return;  // a viscous-core vortex induces nothing at its center
    const double factor = sign * gamma / kTwoPi * (-std::expm1(-r2 / rc2)) / r2;
    u += factor * (-dy);
    v += factor * dx;
  };
  for (int i = lo; i <= hi; ++i) {
    const double base = origin_ + i * a + drift;
    accumulate(base, +0.5 * b, +1.0);            // upper row
    accumulate(base + 0.5 * a, -0.5 * b, -1.0);  // staggered lower row
  }
}

double VortexStreet::pressure(double u, double v) const {
  const double U = cfg_.freestream;
  return -0.5 * (u * u + v * v - U * U);
}

namespace {

// Stratified-jittered samples: one point per cell of a shuffled grid slightly
// finer than the requested count.
void sample_points(const VortexStreetConfig& cfg, Rng& rng, std::vector<double>& coords) {
  const int m = cfg.points_per_snapshot;
  const double lx = cfg.x_max - cfg.x_min;
  const double ly = cfg.y_max - cfg.y_min;
  int gx = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(m) * lx / ly)));
  gx = std::max(gx, 1);
  int gy = static_cast<int>(std::ceil(static_cast<double>(m) / gx));
  std::vector<int> cells(static_cast<size_t>(gx) * gy);
  for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
  rng.shuffle(cells);
  coords.clear();
  coords.reserve(static_cast<size_t>(m) * 2);
  for (int p = 0; p < m; ++p) {
    const int cell = cells[static_cast<size_t>(p)];
    const int cx = cell % gx;
    const int cy = cell / gx;
    const double x = cfg.x_min + (cx + rng.uniform()) * lx / gx;
    const double y = cfg.y_min + (cy + rng.uniform()) * ly / gy;
    coords.push_back(x);
    coords.push_back(y);
  }
}

}  // namespace

Dataset generate_vortex_street(const VortexStreetConfig& cfg) {
  if (cfg.points_per_snapshot < 2) throw ConfigError("points_per_snapshot must be >= 2");
  if (cfg.num_snapshots < 1) throw ConfigError("num_snapshots must be >= 1");
  const VortexStreet street(cfg);
  Dataset ds;
  ds.d_x = 2;
  ds.d_v = 3;
  ds.component_names = {"u", "v", "p"};
  ds.snapshots.reserve(static_cast<size_t>(cfg.num_snapshots));

  std::vector<double> shared_coords;
  if (cfg.shared_points) {
    Rng rng(Rng::mix(cfg.seed, 0xC0FFEE));
    sample_points(cfg, rng, shared_coords);
  }
  for (int s = 0; s < cfg.num_snapshots; ++s) {
    Snapshot snap;
    snap.d_x = 2;
    snap.d_v = 3;
    snap.index = s;
    if (cfg.shared_points) {
      snap.coords = shared_coords;
    } else {
      Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(s)));
      sample_points(cfg, rng, snap.coords);
    }
    const double t = cfg.dt * s;
    const int m = snap.num_points();
    snap.values.resize(static_cast<size_t>(m) * 3);
    for (int i = 0; i < m; ++i) {
      double u, v;
      street.velocity(snap.coord(i, 0), snap.coord(i, 1), t, u, v);
      snap.value(i, 0) = u;
      snap.value(i, 1) = v;
      snap.value(i, 2) = street.pressure(u, v);
    }
    ds.snapshots.push_back(std::move(snap));
  }
  ds.validate();
  return ds;
}

}  // namespace recon
