#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "recon/field.hpp"
#include "recon/io.hpp"

using namespace recon;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("recon_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string str(const std::string& rel = "") const {
    return rel.empty() ? path.string() : (path / rel).string();
  }
};

Snapshot square_snapshot() {
  // Unit square corners plus midpoint, d_v = 1.
  Snapshot s;
  s.d_x = 2;
  s.d_v = 1;
  s.index = 0;
  s.coords = {0, 0, 1, 0, 0, 1, 1, 1, 0.5, 0.5};
  s.values = {1, 2, 3, 4, 5};
  return s;
}

}  // namespace

TEST_CASE("manifest + snapshot loading") {
  TempDir dir;
  SUBCASE("two snapshots of three points load with validated dims") {
    atomic_write_file(dir.str("a.csv"), "x0,x1,u\n0,0,1\n1,0,2\n0,1,3\n");
    atomic_write_file(dir.str("b.csv"), "x0,x1,u\n0,0,4\n1,0,5\n0,1,6\n");
    atomic_write_file(dir.str("manifest.json"),
                      R"({"d_x":2,"d_v":1,"components":["u"],"snapshots":["a.csv","b.csv"]})");
    Dataset ds = load_dataset(dir.str("manifest.json"));
    CHECK(ds.snapshots.size() == 2);
    CHECK(ds.snapshots[0].num_points() == 3);
    CHECK(ds.snapshots[1].value(2, 0) == 6.0);
    CHECK(ds.snapshots[0].index == 0);
    CHECK(ds.snapshots[1].index == 1);
  }
  SUBCASE("NaN rows are rejected with file and line") {
    atomic_write_file(dir.str("bad.csv"), "x0,x1,u\n0,0,1\n1,0,nan\n0,1,3\n");
    atomic_write_file(dir.str("manifest.json"),
                      R"({"d_x":2,"d_v":1,"components":["u"],"snapshots":["bad.csv"]})");
    try {
      load_dataset(dir.str("manifest.json"));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("bad.csv:3") != std::string::npos);
    }
  }
  SUBCASE("wrong column count is rejected") {
    atomic_write_file(dir.str("bad.csv"), "x0,x1,u\n0,0,1\n1,0\n");
    atomic_write_file(dir.str("manifest.json"),
                      R"({"d_x":2,"d_v":1,"components":["u"],"snapshots":["bad.csv"]})");
    CHECK_THROWS_AS(load_dataset(dir.str("manifest.json")), DataError);
  }
  SUBCASE("single-point snapshot violates M >= 2") {
    atomic_write_file(dir.str("tiny.csv"), "x0,x1,u\n0,0,1\n");
    atomic_write_file(dir.str("manifest.json"),
                      R"({"d_x":2,"d_v":1,"components":["u"],"snapshots":["tiny.csv"]})");
    try {
      load_dataset(dir.str("manifest.json"));
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("M >= 2") != std::string::npos);
    }
  }
  SUBCASE("missing snapshot file is an error") {
    atomic_write_file(dir.str("manifest.json"),
                      R"({"d_x":2,"d_v":1,"components":["u"],"snapshots":["gone.csv"]})");
    CHECK_THROWS_AS(load_dataset(dir.str("manifest.json")), DataError);
  }
}

TEST_CASE("save/load round trip is bit exact") {
  TempDir dir;
  VortexStreetConfig cfg;
  cfg.points_per_snapshot = 40;
  cfg.num_snapshots = 3;
  Dataset ds = generate_vortex_street(cfg);
  save_dataset(ds, dir.str(), false);
  Dataset back = load_dataset(dir.str("manifest.json"));
  REQUIRE(back.snapshots.size() == ds.snapshots.size());
  for (size_t i = 0; i < ds.snapshots.size(); ++i) {
    CHECK(back.snapshots[i].coords == ds.snapshots[i].coords);
    CHECK(back.snapshots[i].values == ds.snapshots[i].values);
  }
  SUBCASE("existing dataset is not overwritten without force") {
    CHECK_THROWS_AS(save_dataset(ds, dir.str(), false), DataError);
    save_dataset(ds, dir.str(), true);  // force succeeds
  }
}

TEST_CASE("sequential split") {
  Dataset ds;
  ds.d_x = 2;
  ds.d_v = 1;
  ds.component_names = {"u"};
  auto add_snaps = [&](int n) {
    ds.snapshots.clear();
    for (int i = 0; i < n; ++i) {
      Snapshot s = square_snapshot();
      s.index = i;
      ds.snapshots.push_back(std::move(s));
    }
  };
  SUBCASE("100 snapshots at 0.8 split 0-79 / 80-99") {
    add_snaps(100);
    auto [train, test] = sequential_split(ds, 0.8);
    CHECK(train.snapshots.size() == 80);
    CHECK(test.snapshots.size() == 20);
    CHECK(train.snapshots.front().index == 0);
    CHECK(train.snapshots.back().index == 79);
    CHECK(test.snapshots.front().index == 80);
    CHECK(test.snapshots.back().index == 99);
  }
  SUBCASE("10 at 0.5 gives 5/5") {
    add_snaps(10);
    auto [train, test] = sequential_split(ds, 0.5);
    CHECK(train.snapshots.size() == 5);
    CHECK(test.snapshots.size() == 5);
  }
  SUBCASE("2 at 0.9 floors to 1/1") {
    add_snaps(2);
    auto [train, test] = sequential_split(ds, 0.9);
    CHECK(train.snapshots.size() == 1);
    CHECK(test.snapshots.front().index == 1);
  }
  SUBCASE("empty side is an error") {
    add_snaps(1);
    CHECK_THROWS_AS(sequential_split(ds, 0.5), DataError);
    add_snaps(3);
    CHECK_THROWS_AS(sequential_split(ds, 1.5), ConfigError);
  }
}

TEST_CASE("farthest-point observation sampling") {
  SUBCASE("m = M-1 leaves a single query point") {
    Snapshot s = square_snapshot();
    ObservationSplit split = sample_observations(s, 4, 7);
    CHECK(split.num_observed() == 4);
    CHECK(split.num_query() == 1);
  }
  SUBCASE("two picks on a square are diagonal") {
    Snapshot s;
    s.d_x = 2;
    s.d_v = 1;
    s.coords = {0, 0, 1, 0, 0, 1, 1, 1};
    s.values = {0, 0, 0, 0};
    // brute-force oracle: the pair with maximal distance is a diagonal
    double best = -1;
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) {
        const double dx = s.coord(a, 0) - s.coord(b, 0);
        const double dy = s.coord(a, 1) - s.coord(b, 1);
        best = std::max(best, dx * dx + dy * dy);
      }
    CHECK(best == doctest::Approx(2.0));
    for (uint64_t seed = 0; seed < 8; ++seed) {
      ObservationSplit split = sample_observations(s, 2, seed);
      const int a = split.observed[0], b = split.observed[1];
      const double dx = s.coord(a, 0) - s.coord(b, 0);
      const double dy = s.coord(a, 1) - s.coord(b, 1);
      CHECK(dx * dx + dy * dy == doctest::Approx(best));
    }
  }
  SUBCASE("same seed twice gives the identical split") {
    Snapshot s = square_snapshot();
    ObservationSplit a = sample_observations(s, 3, 42);
    ObservationSplit b = sample_observations(s, 3, 42);
    CHECK(a.observed == b.observed);
    CHECK(a.query == b.query);
  }
  SUBCASE("m out of range") {
    Snapshot s = square_snapshot();
    CHECK_THROWS_AS(sample_observations(s, 0, 1), DataError);
    CHECK_THROWS_AS(sample_observations(s, 5, 1), DataError);
  }
}

TEST_CASE("farthest-point sampling spreads better than random subsets") {
  VortexStreetConfig cfg;
  cfg.points_per_snapshot = 400;
  cfg.num_snapshots = 1;
  Dataset ds = generate_vortex_street(cfg);
  const Snapshot& snap = ds.snapshots.front();
  const int m = 24;
  ObservationSplit split = sample_observations(snap, m, 5);
  auto min_pair_dist = [&](const std::vector<int>& idx) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t a = 0; a < idx.size(); ++a)
      for (size_t b = a + 1; b < idx.size(); ++b) {
        const double dx = snap.coord(idx[a], 0) - snap.coord(idx[b], 0);
        const double dy = snap.coord(idx[a], 1) - snap.coord(idx[b], 1);
        best = std::min(best, dx * dx + dy * dy);
      }
    return best;
  };
  const double fps_dist = min_pair_dist(split.observed);
  Rng rng(99);
  std::vector<int> all(snap.num_points());
  for (int i = 0; i < snap.num_points(); ++i) all[static_cast<size_t>(i)] = i;
  int wins = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const std::vector<int> random_subset = rng.sample_without_replacement(all, m);
    if (fps_dist >= min_pair_dist(random_subset)) ++wins;
  }
  CHECK(wins >= 95);
}

TEST_CASE("noise injection") {
  VortexStreetConfig cfg;
  cfg.points_per_snapshot = 100000;
  cfg.num_snapshots = 1;
  Dataset ds = generate_vortex_street(cfg);
  const Snapshot& snap = ds.snapshots.front();
  const std::vector<double> train_std = {0.5, 0.25, 1.5};
  SUBCASE("zero scale is the identity") {
    Snapshot noisy = add_noise(snap, NoiseSpec{0.0, 3}, train_std);
    CHECK(noisy.values == snap.values);
    CHECK(noisy.coords == snap.coords);
  }
  SUBCASE("unit scale reproduces the requested std within 2%") {
    Snapshot noisy = add_noise(snap, NoiseSpec{1.0, 3}, train_std);
    CHECK(noisy.coords == snap.coords);
    for (int c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      const int m = snap.num_points();
      for (int i = 0; i < m; ++i) mean += noisy.value(i, c) - snap.value(i, c);
      mean /= m;
      for (int i = 0; i < m; ++i) {
        const double d = noisy.value(i, c) - snap.value(i, c) - mean;
        var += d * d;
      }
      const double sd = std::sqrt(var / m);
      CHECK(sd == doctest::Approx(train_std[static_cast<size_t>(c)]).epsilon(0.02));
    }
  }
  SUBCASE("different seeds change values, never coordinates") {
    Snapshot a = add_noise(snap, NoiseSpec{0.5, 1}, train_std);
    Snapshot b = add_noise(snap, NoiseSpec{0.5, 2}, train_std);
    CHECK(a.coords == b.coords);
    CHECK(a.values != b.values);
  }
}

TEST_CASE("normalization") {
  Snapshot s = square_snapshot();
  SUBCASE("identity stats") {
    NormalizationStats st;
    st.coord_mean = {0, 0};
    st.coord_std = {1, 1};
    st.value_mean = {0};
    st.value_std = {1};
    Snapshot n = normalize(s, st);
    CHECK(n.coords == s.coords);
    CHECK(n.values == s.values);
  }
  SUBCASE("round trip within 1e-6") {
    Dataset ds;
    ds.d_x = 2;
    ds.d_v = 1;
    ds.component_names = {"u"};
    ds.snapshots = {s};
    NormalizationStats st = compute_normalization(ds);
    Snapshot back = denormalize(normalize(s, st), st);
    for (size_t i = 0; i < s.values.size(); ++i)
      CHECK(back.values[i] == doctest::Approx(s.values[i]).epsilon(1e-6));
    for (size_t i = 0; i < s.coords.size(); ++i)
      CHECK(back.coords[i] == doctest::Approx(s.coords[i]).epsilon(1e-6));
  }
  SUBCASE("single value standardizes by hand") {
    NormalizationStats st;
    st.coord_mean = {0, 0};
    st.coord_std = {1, 1};
    st.value_mean = {3};
    st.value_std = {2};
    Snapshot one = s;
    one.values = {5, 5, 5, 5, 5};
    Snapshot n = normalize(one, st);
    for (int i = 0; i < 5; ++i) CHECK(n.value(i, 0) == doctest::Approx(1.0));
  }
}

TEST_CASE("vortex street generator") {
  SUBCASE("far upstream of a finite street the flow is freestream") {
    VortexStreetConfig cfg;
    cfg.pairs = 6;
    cfg.street_origin = 0.0;
    cfg.core_radius = 0.25;
    VortexStreet street(cfg);
    double u, v;
    // 100 core radii upstream of the first vortex
    street.velocity(-100.0 * cfg.core_radius, 0.0, 0.0, u, v);
    CHECK(std::abs(u - cfg.freestream) < 0.01 * cfg.freestream);
    CHECK(std::abs(v) < 0.01 * cfg.freestream);
  }
  SUBCASE("a vortex center sees only the other vortices") {
    VortexStreetConfig cfg;
    cfg.pairs = 4;
    cfg.street_origin = 0.0;
    VortexStreet street(cfg);
    // center of upper-row vortex i = 1 at t = 0
    const double cx = cfg.street_origin + 1 * cfg.spacing_x;
    const double cy = 0.5 * cfg.spacing_y;
    double u, v;
    street.velocity(cx, cy, 0.0, u, v);
    // independent oracle: freestream + explicit sum over the other vortices
    double uo = cfg.freestream, vo = 0.0;
    constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
    for (int i = 0; i < cfg.pairs; ++i) {
      auto add = [&](double vx, double vy, double sign) {
        const double dx = cx - vx, dy = cy - vy;
        const double r2 = dx * dx + dy * dy;
        if (r2 == 0.0) return;
        const double f = sign * cfg.circulation / kTwoPi *
                         (-std::expm1(-r2 / (cfg.core_radius * cfg.core_radius))) / r2;
        uo += f * -dy;
        vo += f * dx;
      };
      add(i * cfg.spacing_x, 0.5 * cfg.spacing_y, 1.0);
      add((i + 0.5) * cfg.spacing_x, -0.5 * cfg.spacing_y, -1.0);
    }
    CHECK(u == doctest::Approx(uo).epsilon(1e-12));
    CHECK(v == doctest::Approx(vo).epsilon(1e-12));
  }
  SUBCASE("pattern advects downstream") {
    VortexStreetConfig cfg;
    VortexStreet street(cfg);
    Rng rng(3);
    const double dt = 0.37;
    for (int t = 0; t < 50; ++t) {
      const double x = rng.uniform(cfg.x_min, cfg.x_max);
      const double y = rng.uniform(cfg.y_min, cfg.y_max);
      double u0, v0, u1, v1;
      street.velocity(x, y, 1.0, u0, v0);
      street.velocity(x + cfg.advection_speed * dt, y, 1.0 + dt, u1, v1);
      CHECK(u1 == doctest::Approx(u0).epsilon(1e-6));
      CHECK(v1 == doctest::Approx(v0).epsilon(1e-6));
    }
  }
  SUBCASE("velocity field is numerically divergence free") {
    VortexStreetConfig cfg;
    VortexStreet street(cfg);
    const double h = 1e-4;
    double acc = 0;
    int count = 0;
    const int grid = 80;
    for (int i = 0; i < grid; ++i) {
      for (int j = 0; j < grid; ++j) {
        const double x = cfg.x_min + (i + 0.5) * (cfg.x_max - cfg.x_min) / grid;
        const double y = cfg.y_min + (j + 0.5) * (cfg.y_max - cfg.y_min) / grid;
        double ue, uw, vn, vs, dummy;
        street.velocity(x + h, y, 0.5, ue, dummy);
        street.velocity(x - h, y, 0.5, uw, dummy);
        street.velocity(x, y + h, 0.5, dummy, vn);
        street.velocity(x, y - h, 0.5, dummy, vs);
        const double div = (ue - uw) / (2 * h) + (vn - vs) / (2 * h);
        acc += div * div;
        ++count;
      }
    }
    const double rms = std::sqrt(acc / count);
    CHECK(rms < 1e-3 * cfg.freestream);
  }
  SUBCASE("pressure surrogate follows the velocity magnitude") {
    VortexStreetConfig cfg;
    VortexStreet street(cfg);
    double u, v;
    street.velocity(3.0, 0.2, 0.0, u, v);
    CHECK(street.pressure(u, v) ==
          doctest::Approx(-0.5 * (u * u + v * v - cfg.freestream * cfg.freestream)));
  }
  SUBCASE("same seed gives identical datasets; shared points repeat coords") {
    VortexStreetConfig cfg;
    cfg.points_per_snapshot = 50;
    cfg.num_snapshots = 2;
    Dataset a = generate_vortex_street(cfg);
    Dataset b = generate_vortex_street(cfg);
    CHECK(a.snapshots[0].coords == b.snapshots[0].coords);
    CHECK(a.snapshots[0].values == b.snapshots[0].values);
    CHECK(a.snapshots[0].coords == a.snapshots[1].coords);  // shared_points
    cfg.shared_points = false;
    Dataset c = generate_vortex_street(cfg);
    CHECK(c.snapshots[0].coords != c.snapshots[1].coords);
  }
  SUBCASE("bad configuration is rejected") {
    VortexStreetConfig cfg;
    cfg.core_radius = 0.0;
    CHECK_THROWS_AS(VortexStreet{cfg}, ConfigError);
    VortexStreetConfig cfg2;
    cfg2.x_min = 5;
    cfg2.x_max = 5;
    CHECK_THROWS_AS(VortexStreet{cfg2}, ConfigError);
    VortexStreetConfig cfg3;
    cfg3.freestream = -1;
    CHECK_THROWS_AS(VortexStreet{cfg3}, ConfigError);
  }
}
