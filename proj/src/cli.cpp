#include "recon/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "recon/baselines.hpp"
#include "recon/io.hpp"
#include "recon/neural_process.hpp"

using nlohmann::json;

namespace recon {

namespace {

// Seed streams per purpose so sweeps stay decorrelated but reproducible.
uint64_t split_seed(uint64_t seed, int snapshot_index) {
  return Rng::mix(seed, 0x510000ULL + static_cast<uint64_t>(snapshot_index));
}
uint64_t noise_seed(uint64_t seed, int snapshot_index) {
  return Rng::mix(seed, 0x4E0000ULL + static_cast<uint64_t>(snapshot_index));
}
uint64_t budget_seed(uint64_t seed, int snapshot_index) {
  return Rng::mix(seed, 0xB00000ULL + static_cast<uint64_t>(snapshot_index));
}

struct Pipeline {
  Dataset train_set;
  Dataset test_set;
  NormalizationStats stats;
};

Pipeline load_pipeline(const RunConfig& cfg) {
  Pipeline p;
  const Dataset ds = load_dataset(path_join(cfg.data_dir, "manifest.json"));
  auto [train_set, test_set] = sequential_split(ds, cfg.train_fraction);
  p.train_set = std::move(train_set);
  p.test_set = std::move(test_set);
  p.stats = compute_normalization(p.train_set);
  return p;
}

int observed_count(const Snapshot& snap, double density) {
  const int m = static_cast<int>(std::lround(density * snap.num_points()));
  return std::clamp(m, 1, snap.num_points() - 1);
}

std::vector<ObservationSplit> make_splits(const Dataset& ds, double density,
                                          uint64_t seed) {
  std::vector<ObservationSplit> splits;
  splits.reserve(ds.snapshots.size());
  for (const auto& snap : ds.snapshots)
    splits.push_back(sample_observations(snap, observed_count(snap, density),
                                         split_seed(seed, snap.index)));
  return splits;
}

ModelConfig model_config_for(const RunConfig& cfg, const Dataset& ds) {
  ModelConfig mc = cfg.model;
  mc.d_x = ds.d_x;
  mc.d_v = ds.d_v;
  mc.validate();
  return mc;
}

NpConfig np_config_for(const RunConfig& cfg, const Dataset& ds, bool tnp) {
  NpConfig nc = cfg.np;
  nc.d_x = ds.d_x;
  nc.d_v = ds.d_v;
  nc.epochs = tnp ? cfg.tnp_epochs : cfg.cnp_epochs;
  nc.seed = cfg.seed;
  nc.validate();
  return nc;
}

std::string format_cell(double mean, double stdev) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", mean, stdev);
  return buf;
}

json aggregate_to_json(const AggregateMetrics& a) {
  json comps = json::object();
  for (size_t c = 0; c < a.component_names.size(); ++c) {
    comps[a.component_names[c]] = {{"mean", a.rmse_mean[c]}, {"std", a.rmse_std[c]}};
  }
  json out{{"total", {{"mean", a.total_mean}, {"std", a.total_std}}},
           {"components", comps},
           {"num_snapshots", a.num_snapshots}};
  if (!a.r2_mean.empty()) {
    json r2 = json::object();
    for (size_t c = 0; c < a.component_names.size(); ++c)
      r2[a.component_names[c]] = {{"mean", a.r2_mean[c]}, {"std", a.r2_std[c]}};
    out["r2"] = r2;
  }
  return out;
}

AggregateMetrics aggregate_from_json(const json& j,
                                     const std::vector<std::string>& components) {
  AggregateMetrics a;
  a.component_names = components;
  a.total_mean = j.at("total").at("mean").get<double>();
  a.total_std = j.at("total").at("std").get<double>();
  a.num_snapshots = j.at("num_snapshots").get<int>();
  for (const auto& name : components) {
    a.rmse_mean.push_back(j.at("components").at(name).at("mean").get<double>());
    a.rmse_std.push_back(j.at("components").at(name).at("std").get<double>());
  }
  if (j.contains("r2")) {
    for (const auto& name : components) {
      a.r2_mean.push_back(j.at("r2").at(name).at("mean").get<double>());
      a.r2_std.push_back(j.at("r2").at(name).at("std").get<double>());
    }
  }
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// generate

void cmd_generate(const RunConfig& cfg) {
  Dataset ds = generate_vortex_street(cfg.generate);
  save_dataset(ds, cfg.data_dir, cfg.force);
  std::printf("wrote %zu snapshots of %d points (%d components) to %s\n",
              ds.snapshots.size(), ds.snapshots.front().num_points(), ds.d_v,
              cfg.data_dir.c_str());
}

// ---------------------------------------------------------------------------
// train

void cmd_train(const RunConfig& cfg) {
  Pipeline p = load_pipeline(cfg);
  const std::vector<ObservationSplit> splits =
      make_splits(p.train_set, cfg.density, cfg.seed);

  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.obs_per_sequence = cfg.obs_per_sequence;
  tc.query_per_sequence = cfg.query_per_sequence;
  tc.learning_rate = static_cast<float>(cfg.learning_rate);
  tc.seed = cfg.seed;
  tc.steps_per_epoch = cfg.steps_per_epoch;
  tc.noise_scale = cfg.noise_scale;
  tc.checkpoint_path = cfg.checkpoint_path();
  tc.verbose = true;

  RFormerModel model;
  AdamState opt;
  std::vector<double> previous_losses;
  NormalizationStats stats = p.stats;
  if (cfg.resume && file_exists(tc.checkpoint_path)) {
    const Checkpoint ck = Checkpoint::load(tc.checkpoint_path);
    model = model_from_checkpoint(ck, &stats, &opt);
    tc.start_epoch = ck.metadata.at("epoch").get<int>();
    previous_losses = ck.metadata.at("loss_history").get<std::vector<double>>();
    if (ck.metadata.contains("steps_per_epoch") && tc.steps_per_epoch == 0)
      tc.steps_per_epoch = ck.metadata.at("steps_per_epoch").get<int>();
    std::printf("resuming from epoch %d\n", tc.start_epoch);
  } else {
    model = RFormerModel::init(model_config_for(cfg, p.train_set), cfg.seed);
  }
  std::printf("model parameters: %lld\n",
              static_cast<long long>(model.param_count()));

  TrainResult result = train(model, p.train_set, splits, stats, tc,
                             &opt, previous_losses.empty() ? nullptr : &previous_losses);
  if (tc.checkpoint_path.empty() || result.epochs_completed == tc.start_epoch) {
    // No epoch boundary was reached; persist the final state anyway.
    json meta{{"epoch", result.epochs_completed},
              {"seed", cfg.seed},
              {"loss_history", result.loss_history}};
    make_checkpoint(model, stats, meta, &opt).save(cfg.checkpoint_path());
  }

  std::ostringstream losses;
  losses << "step,loss\n";
  for (size_t i = 0; i < result.loss_history.size(); ++i)
    losses << i << "," << format_double(result.loss_history[i]) << "\n";
  atomic_write_file(path_join(cfg.out_dir, "loss_history.csv"), losses.str());
  atomic_write_file(path_join(cfg.out_dir, "config_echo.ini"), config_to_text(cfg));
  if (!result.loss_history.empty())
    std::printf("final step loss: %.6f\n", result.loss_history.back());
}

// ---------------------------------------------------------------------------
// evaluate

namespace {

struct MethodContext {
  const RunConfig& cfg;
  const Pipeline& pipe;
  // Per test snapshot: evaluation split and (possibly noisy) context values.
  std::vector<ObservationSplit> splits;
  std::vector<Snapshot> context_snaps;  // values noisy when noise_scale > 0
};

// Predictions at split.query order for one snapshot, plus the assembled full
// field (observed passthrough + query predictions) for spectra/dumps.
struct SnapshotPrediction {
  std::vector<double> at_queries;  // [n x d_v]
  std::vector<double> full_field;  // [M x d_v]
};

std::vector<double> truth_at_queries(const Snapshot& snap, const ObservationSplit& split) {
  std::vector<double> out;
  out.reserve(split.query.size() * static_cast<size_t>(snap.d_v));
  for (int q : split.query)
    for (int c = 0; c < snap.d_v; ++c) out.push_back(snap.value(q, c));
  return out;
}

SnapshotPrediction assemble(const Snapshot& context_snap, const ObservationSplit& split,
                            std::vector<double> at_queries) {
  SnapshotPrediction pred;
  pred.full_field.assign(context_snap.values.size(),
                         std::numeric_limits<double>::quiet_NaN());
  const int d_v = context_snap.d_v;
  for (size_t qi = 0; qi < split.query.size(); ++qi)
    for (int c = 0; c < d_v; ++c)
      pred.full_field[static_cast<size_t>(split.query[qi]) * d_v + c] =
          at_queries[qi * d_v + c];
  for (int o : split.observed)
    for (int c = 0; c < d_v; ++c)
      pred.full_field[static_cast<size_t>(o) * d_v + c] = context_snap.value(o, c);
  pred.at_queries = std::move(at_queries);
  return pred;
}

class MethodRunner {
 public:
  virtual ~MethodRunner() = default;
  virtual SnapshotPrediction reconstruct(const MethodContext& ctx, int test_index) = 0;
};

class TruthRunner : public MethodRunner {
 public:
  SnapshotPrediction reconstruct(const MethodContext& ctx, int i) override {
    const Snapshot& clean = ctx.pipe.test_set.snapshots[static_cast<size_t>(i)];
    return assemble(clean, ctx.splits[static_cast<size_t>(i)],
                    truth_at_queries(clean, ctx.splits[static_cast<size_t>(i)]));
  }
};

class RbfRunner : public MethodRunner {
 public:
  SnapshotPrediction reconstruct(const MethodContext& ctx, int i) override {
    const Snapshot& snap = ctx.context_snaps[static_cast<size_t>(i)];
    const ObservationSplit& split = ctx.splits[static_cast<size_t>(i)];
    return assemble(snap, split, rbf_reconstruct(snap, split, ctx.cfg.rbf));
  }
};

class KrigingRunner : public MethodRunner {
 public:
  SnapshotPrediction reconstruct(const MethodContext& ctx, int i) override {
    const Snapshot& snap = ctx.context_snaps[static_cast<size_t>(i)];
    const ObservationSplit& split = ctx.splits[static_cast<size_t>(i)];
    return assemble(snap, split,
                    kriging_reconstruct(snap, split, ctx.cfg.kriging,
                                        static_cast<uint64_t>(snap.index)));
  }
};

class GappyRunner : public MethodRunner {
 public:
  explicit GappyRunner(const MethodContext& ctx)
      : model_(gappy_pod_fit(ctx.pipe.train_set, ctx.cfg.gappy_pod.energy_threshold)) {}

  SnapshotPrediction reconstruct(const MethodContext& ctx, int i) override {
    const Snapshot& snap = ctx.context_snaps[static_cast<size_t>(i)];
    const ObservationSplit& split = ctx.splits[static_cast<size_t>(i)];
    return assemble(snap, split, gappy_pod_predict(model_, snap, split));
  }

 private:
  GappyPodModel model_;
};

class RFormerRunner : public MethodRunner {
 public:
  explicit RFormerRunner(const RunConfig& cfg) {
    const Checkpoint ck = Checkpoint::load(cfg.checkpoint_path());
    model_ = model_from_checkpoint(ck, &stats_);
  }

  SnapshotPrediction reconstruct(const MethodContext& ctx, int i) override {
    const Snapshot& snap = ctx.context_snaps[static_cast<size_t>(i)];
    ObservationSplit split = ctx.splits[static_cast<size_t>(i)];
    if (split.num_observed() > ctx.cfg.eval_obs_budget) {
      split.observed = farthest_point_subset(
          snap, split.observed, ctx.cfg.eval_obs_budget,
          budget_seed(ctx.cfg.seed, snap.index));
    }
    const std::vector<double> full =
        reconstruct_chunked(model_, snap, split, stats_, ctx.cfg.chunk);
    const ObservationSplit& full_split = ctx.splits[static_cast<size_t>(i)];
    std::vector<double> at_queries;
    at_queries.reserve(full_split.query.size() * static_cast<size_t>(snap.d_v));
    for (int q : full_split.query)
      for (int c = 0; c < snap.d_v; ++c)
        at_queries.push_back(full[static_cast<size_t>(q) * snap.d_v + c]);
    return assemble(snap, full_split, std::move(at_queries));
  }

 private:
  RFormerModel model_;
  NormalizationStats stats_;
};

class NpRunner : public MethodRunner {
 public:
  NpRunner(const MethodContext& ctx, NpKind kind) {
    const RunConfig& cfg = ctx.cfg;
    const bool tnp = kind == NpKind::kTnp;
    const std::string path =
        path_join(cfg.out_dir, tnp ? "tnp.rck" : "cnp.rck");
    if (file_exists(path) && !cfg.force) {
      const Checkpoint ck = Checkpoint::load(path);
      model_ = np_from_checkpoint(ck, &stats_);
      return;
    }
    stats_ = ctx.pipe.stats;
    model_ = NeuralProcess::init(kind, np_config_for(cfg, ctx.pipe.train_set, tnp),
                                 cfg.seed);
    const std::vector<ObservationSplit> splits =
        make_splits(ctx.pipe.train_set, cfg.density, cfg.seed);
    NpTrainResult r = np_train(model_, ctx.pipe.train_set, splits, stats_);
    json meta{{"seed", cfg.seed}, {"loss_history", r.loss_history}};
    np_make_checkpoint(model_, stats_, meta).save(path);
  }

  SnapshotPrediction reconstruct(const MethodContext& ctx, int i) override {
    const Snapshot& snap = ctx.context_snaps[static_cast<size_t>(i)];
    const ObservationSplit& split = ctx.splits[static_cast<size_t>(i)];
    return assemble(snap, split, np_reconstruct(model_, snap, split, stats_));
  }

 private:
  NeuralProcess model_;
  NormalizationStats stats_;
};

std::unique_ptr<MethodRunner> make_runner(const std::string& method,
                                          const MethodContext& ctx) {
  if (method == "truth") return std::make_unique<TruthRunner>();
  if (method == "interpolation" || method == "rbf") return std::make_unique<RbfRunner>();
  if (method == "kriging") return std::make_unique<KrigingRunner>();
  if (method == "gappy_pod") return std::make_unique<GappyRunner>(ctx);
  if (method == "rformer") return std::make_unique<RFormerRunner>(ctx.cfg);
  if (method == "cnp") return std::make_unique<NpRunner>(ctx, NpKind::kCnp);
  if (method == "tnp") return std::make_unique<NpRunner>(ctx, NpKind::kTnp);
  throw ConfigError("unknown evaluation method '" + method + "'");
}

std::vector<int> velocity_components(const Dataset& ds) {
  // Velocity channels are the first min(d_x, d_v) components by the dataset
  // conventions used here (u, v[, w], then scalars like pressure).
  std::vector<int> comps;
  for (int c = 0; c < std::min(ds.d_x, ds.d_v); ++c) comps.push_back(c);
  return comps;
}

}  // namespace

EvalSummary cmd_evaluate(const RunConfig& cfg) {
  Pipeline pipe = load_pipeline(cfg);
  MethodContext ctx{cfg, pipe, {}, {}};
  const int num_test = static_cast<int>(pipe.test_set.snapshots.size());
  if (num_test == 0) throw DataError("evaluate: empty test set");

  for (const auto& snap : pipe.test_set.snapshots) {
    ctx.splits.push_back(sample_observations(snap, observed_count(snap, cfg.density),
                                             split_seed(cfg.seed, snap.index)));
    if (cfg.noise_scale > 0.0) {
      ctx.context_snaps.push_back(add_noise(
          snap, NoiseSpec{cfg.noise_scale, noise_seed(cfg.seed, snap.index)},
          pipe.stats.value_std));
    } else {
      ctx.context_snaps.push_back(snap);
    }
  }

  EvalSummary summary;
  summary.components = pipe.test_set.component_names;
  const std::vector<int> vel = velocity_components(pipe.test_set);

  std::vector<Spectrum> truth_spectra;
  if (cfg.spectrum) {
    for (const auto& snap : pipe.test_set.snapshots)
      truth_spectra.push_back(energy_spectrum(snap, vel, cfg.spectrum_grid));
  }

  for (const auto& method : cfg.methods) {
    std::unique_ptr<MethodRunner> runner = make_runner(method, ctx);
    MethodReport report;
    report.method = method;
    double spec_dist = 0.0;
    for (int i = 0; i < num_test; ++i) {
      const Snapshot& clean = pipe.test_set.snapshots[static_cast<size_t>(i)];
      const ObservationSplit& split = ctx.splits[static_cast<size_t>(i)];
      SnapshotPrediction pred = runner->reconstruct(ctx, i);

      const std::vector<double> truth = truth_at_queries(clean, split);
      SnapshotMetrics row;
      row.snapshot_index = clean.index;
      row.rmse = relative_rmse(pred.at_queries, truth, clean.d_v,
                               summary.components);
      const size_t nq = split.query.size();
      std::vector<double> pc(nq), tc(nq);
      for (int c = 0; c < clean.d_v; ++c) {
        for (size_t q = 0; q < nq; ++q) {
          pc[q] = pred.at_queries[q * clean.d_v + c];
          tc[q] = truth[q * clean.d_v + c];
        }
        row.r2_per_component.push_back(r_squared(pc, tc));
      }
      report.per_snapshot.push_back(std::move(row));

      if (cfg.spectrum) {
        const Spectrum sp = energy_spectrum(clean.coords, pred.full_field, clean.d_x,
                                            clean.d_v, vel, cfg.spectrum_grid);
        spec_dist += spectrum_log_distance(sp, truth_spectra[static_cast<size_t>(i)]);
        if (report.mean_spectrum.energy.empty()) {
          report.mean_spectrum = sp;
        } else {
          for (size_t k = 0; k < sp.energy.size(); ++k)
            report.mean_spectrum.energy[k] += sp.energy[k];
        }
      }
      if (cfg.dump_fields) {
        Snapshot dump = clean;
        dump.values = pred.full_field;
        char name[64];
        std::snprintf(name, sizeof(name), "field_%s_%04d.csv", method.c_str(),
                      clean.index);
        save_snapshot_csv(dump, summary.components,
                          path_join(path_join(cfg.out_dir, "fields"), name));
      }
    }
    if (cfg.spectrum) {
      report.has_spectrum = true;
      report.spectrum_log_distance = spec_dist / num_test;
      for (auto& e : report.mean_spectrum.energy) e /= num_test;
    }
    report.agg = aggregate(report.per_snapshot, summary.components);
    summary.methods.push_back(std::move(report));
  }

  ensure_directory(cfg.out_dir);
  atomic_write_file(path_join(cfg.out_dir, "report.json"), report_to_json_text(summary));
  atomic_write_file(path_join(cfg.out_dir, "report.txt"), report_to_table(summary));
  if (cfg.spectrum) {
    std::ostringstream sp;
    sp << "k,truth";
    for (const auto& m : summary.methods) sp << "," << m.method;
    sp << "\n";
    Spectrum mean_truth = truth_spectra.front();
    for (size_t i = 1; i < truth_spectra.size(); ++i)
      for (size_t k = 0; k < mean_truth.energy.size(); ++k)
        mean_truth.energy[k] += truth_spectra[i].energy[k];
    for (auto& e : mean_truth.energy) e /= static_cast<double>(truth_spectra.size());
    for (size_t k = 0; k < mean_truth.energy.size(); ++k) {
      sp << mean_truth.wavenumber[k] << "," << format_double(mean_truth.energy[k]);
      for (const auto& m : summary.methods)
        sp << "," << format_double(m.mean_spectrum.energy[k]);
      sp << "\n";
    }
    atomic_write_file(path_join(cfg.out_dir, "spectra.csv"), sp.str());
  }
  return summary;
}

// ---------------------------------------------------------------------------
// report rendering

std::string report_to_json_text(const EvalSummary& summary) {
  json j;
  j["components"] = summary.components;
  json methods = json::array();
  for (const auto& m : summary.methods) {
    json jm;
    jm["method"] = m.method;
    jm["aggregate"] = aggregate_to_json(m.agg);
    if (m.has_spectrum) jm["spectrum_log_distance"] = m.spectrum_log_distance;
    json rows = json::array();
    for (const auto& r : m.per_snapshot) {
      json jr{{"index", r.snapshot_index},
              {"total", r.rmse.total},
              {"components", r.rmse.per_component}};
      if (!r.r2_per_component.empty()) jr["r2"] = r.r2_per_component;
      rows.push_back(std::move(jr));
    }
    jm["per_snapshot"] = std::move(rows);
    methods.push_back(std::move(jm));
  }
  j["methods"] = std::move(methods);
  return j.dump(2) + "\n";
}

std::string report_to_table(const EvalSummary& summary) {
  // Rows sorted by total mean, best first, like the reference tables.
  std::vector<const MethodReport*> order;
  for (const auto& m : summary.methods) order.push_back(&m);
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->agg.total_mean < b->agg.total_mean;
  });
  const size_t name_w = 14;
  const size_t cell_w = 22;
  std::ostringstream o;
  o << "Relative RMSE (mean +/- std across snapshots; lower is better)\n";
  o << std::string(name_w, ' ');
  for (const auto& c : summary.components)
    o << std::string(cell_w - c.size(), ' ') << c;
  o << std::string(cell_w - 5, ' ') << "Total\n";
  for (const auto* m : order) {
    o << m->method << std::string(name_w > m->method.size() ? name_w - m->method.size() : 1, ' ');
    for (size_t c = 0; c < summary.components.size(); ++c) {
      const std::string cell = format_cell(m->agg.rmse_mean[c], m->agg.rmse_std[c]);
      o << std::string(cell_w - cell.size(), ' ') << cell;
    }
    const std::string cell = format_cell(m->agg.total_mean, m->agg.total_std);
    o << std::string(cell_w - cell.size(), ' ') << cell << "\n";
  }
  bool any_r2 = false;
  for (const auto& m : summary.methods) any_r2 = any_r2 || !m.agg.r2_mean.empty();
  if (any_r2) {
    o << "\nR^2 per component (mean +/- std; higher is better)\n";
    for (const auto* m : order) {
      if (m->agg.r2_mean.empty()) continue;
      o << m->method
        << std::string(name_w > m->method.size() ? name_w - m->method.size() : 1, ' ');
      for (size_t c = 0; c < summary.components.size(); ++c) {
        const std::string cell = format_cell(m->agg.r2_mean[c], m->agg.r2_std[c]);
        o << std::string(cell_w - cell.size(), ' ') << cell;
      }
      o << "\n";
    }
  }
  bool any_spec = false;
  for (const auto& m : summary.methods) any_spec = any_spec || m.has_spectrum;
  if (any_spec) {
    o << "\nSpectrum log-L2 distance to truth (lower is better)\n";
    for (const auto* m : order) {
      if (!m->has_spectrum) continue;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.4f", m->spectrum_log_distance);
      o << m->method
        << std::string(name_w > m->method.size() ? name_w - m->method.size() : 1, ' ')
        << buf << "\n";
    }
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// reconstruct

void cmd_reconstruct(const RunConfig& cfg) {
  Pipeline pipe = load_pipeline(cfg);
  const Checkpoint ck = Checkpoint::load(cfg.checkpoint_path());
  NormalizationStats stats;
  RFormerModel model = model_from_checkpoint(ck, &stats);
  const std::string dir = path_join(cfg.out_dir, "reconstruction");
  ensure_directory(dir);
  for (const auto& snap : pipe.test_set.snapshots) {
    ObservationSplit split = sample_observations(
        snap, observed_count(snap, cfg.density), split_seed(cfg.seed, snap.index));
    Snapshot context = snap;
    if (cfg.noise_scale > 0.0)
      context = add_noise(snap, NoiseSpec{cfg.noise_scale, noise_seed(cfg.seed, snap.index)},
                          pipe.stats.value_std);
    if (split.num_observed() > cfg.eval_obs_budget)
      split.observed = farthest_point_subset(context, split.observed,
                                             cfg.eval_obs_budget,
                                             budget_seed(cfg.seed, snap.index));
    Snapshot out = snap;
    out.values = reconstruct_chunked(model, context, split, stats, cfg.chunk);
    char name[48];
    std::snprintf(name, sizeof(name), "snap_%04d.csv", snap.index);
    save_snapshot_csv(out, pipe.test_set.component_names, path_join(dir, name));
  }
  std::printf("wrote %zu reconstructed snapshots to %s\n",
              pipe.test_set.snapshots.size(), dir.c_str());
}

// ---------------------------------------------------------------------------
// ablate

namespace {

std::string axis_dir(const std::string& prefix, double value) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s_%g", prefix.c_str(), value);
  return buf;
}

AblateRow run_grid_point(const RunConfig& base, const std::string& subdir,
                         double axis_value, double density, double noise) {
  RunConfig cfg = base;
  cfg.out_dir = subdir;
  cfg.checkpoint.clear();
  cfg.density = density;
  cfg.noise_scale = noise;
  cfg.epochs = base.ablate_epochs > 0 ? base.ablate_epochs : base.epochs;
  cfg.methods = {"rformer"};
  cfg.spectrum = false;
  cfg.dump_fields = false;

  const std::string metrics_path = path_join(subdir, "metrics.json");
  AblateRow row;
  row.axis = axis_value;
  if (file_exists(metrics_path)) {  // completed grid points are skipped
    const json j = json::parse(read_file(metrics_path));
    row.agg = aggregate_from_json(j.at("aggregate"),
                                  j.at("components").get<std::vector<std::string>>());
    return row;
  }
  cmd_train(cfg);
  EvalSummary summary = cmd_evaluate(cfg);
  row.agg = summary.methods.front().agg;
  json j{{"axis", axis_value},
         {"components", summary.components},
         {"aggregate", aggregate_to_json(row.agg)}};
  atomic_write_file(metrics_path, j.dump(2) + "\n");
  return row;
}

void write_sweep_csv(const std::string& path, const std::string& axis_name,
                     const std::vector<AblateRow>& rows,
                     const std::vector<std::string>& components) {
  std::ostringstream o;
  o << axis_name;
  for (const auto& c : components) o << "," << c << "_mean";
  o << ",total_mean,total_std\n";
  for (const auto& r : rows) {
    o << format_double(r.axis);
    for (size_t c = 0; c < components.size(); ++c)
      o << "," << format_double(r.agg.rmse_mean[c]);
    o << "," << format_double(r.agg.total_mean) << ","
      << format_double(r.agg.total_std) << "\n";
  }
  atomic_write_file(path, o.str());
}

}  // namespace

AblateResult cmd_ablate(const RunConfig& cfg) {
  AblateResult result;
  const std::string root = path_join(cfg.out_dir, "ablate");
  ensure_directory(root);
  std::vector<std::string> components;
  for (double d : cfg.densities) {
    const std::string sub = path_join(root, axis_dir("density", d));
    result.density_rows.push_back(run_grid_point(cfg, sub, d, d, cfg.noise_scale));
    components = result.density_rows.back().agg.component_names;
  }
  for (double s : cfg.noise_scales) {
    const std::string sub = path_join(root, axis_dir("noise", s));
    result.noise_rows.push_back(run_grid_point(cfg, sub, s, cfg.density, s));
    components = result.noise_rows.back().agg.component_names;
  }
  if (!result.density_rows.empty())
    write_sweep_csv(path_join(root, "density.csv"), "density", result.density_rows,
                    components);
  if (!result.noise_rows.empty())
    write_sweep_csv(path_join(root, "noise.csv"), "noise_scale", result.noise_rows,
                    components);
  return result;
}

// ---------------------------------------------------------------------------
// compare

void cmd_compare(const std::vector<std::string>& report_paths,
                 const std::string& out_path) {
  if (report_paths.empty()) throw ConfigError("compare: no reports given");
  EvalSummary merged;
  std::set<std::string> seen;
  for (const auto& path : report_paths) {
    json j;
    try {
      j = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw DataError("bad report " + path + ": " + e.what());
    }
    const auto components = j.at("components").get<std::vector<std::string>>();
    if (merged.components.empty()) merged.components = components;
    if (merged.components != components)
      throw DataError("compare: component sets disagree in " + path);
    for (const auto& jm : j.at("methods")) {
      MethodReport m;
      m.method = jm.at("method").get<std::string>();
      if (!seen.insert(m.method).second) continue;  // first occurrence wins
      m.agg = aggregate_from_json(jm.at("aggregate"), components);
      if (jm.contains("spectrum_log_distance")) {
        m.has_spectrum = true;
        m.spectrum_log_distance = jm.at("spectrum_log_distance").get<double>();
      }
      merged.methods.push_back(std::move(m));
    }
  }
  const std::string table = report_to_table(merged);
  atomic_write_file(out_path, table);
  std::fputs(table.c_str(), stdout);
}

}  // namespace recon
