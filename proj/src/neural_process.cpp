#include "recon/neural_process.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

using nlohmann::json;

namespace recon {

void NpConfig::validate() const {
  if (hidden < 1) throw ConfigError("np: hidden must be >= 1");
  if (cnp_encoder_layers < 1 || cnp_decoder_layers < 1)
    throw ConfigError("np: encoder/decoder depths must be >= 1");
  if (tnp_layers < 1 || tnp_heads < 1 || hidden % tnp_heads != 0)
    throw ConfigError("np: hidden must be divisible by tnp_heads");
  if (batch_size < 1 || epochs < 0) throw ConfigError("np: bad batch size or epochs");
  if (max_queries_per_batch < 1) throw ConfigError("np: max_queries_per_batch must be >= 1");
  if (d_x < 1 || d_x > 3 || d_v < 1) throw ConfigError("np: bad d_x or d_v");
}

std::vector<std::pair<std::string, std::vector<int>>> np_param_spec(NpKind kind,
                                                                    const NpConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<int>>> spec;
  const int h = cfg.hidden;
  const int in = cfg.d_x + cfg.d_v;
  if (kind == NpKind::kCnp) {
    for (int l = 0; l < cfg.cnp_encoder_layers; ++l) {
      const int fan_in = l == 0 ? in : h;
      spec.push_back({"enc." + std::to_string(l) + ".weight", {fan_in, h}});
      spec.push_back({"enc." + std::to_string(l) + ".bias", {h}});
    }
    for (int l = 0; l < cfg.cnp_decoder_layers; ++l) {
      const int fan_in = l == 0 ? h + cfg.d_x : h;
      const int fan_out = l == cfg.cnp_decoder_layers - 1 ? 2 * cfg.d_v : h;
      spec.push_back({"dec." + std::to_string(l) + ".weight", {fan_in, fan_out}});
      spec.push_back({"dec." + std::to_string(l) + ".bias", {fan_out}});
    }
  } else {
    spec.push_back({"input.weight", {in, h}});
    spec.push_back({"input.bias", {h}});
    spec.push_back({"role.weight", {2, h}});  // row 0 context, row 1 query
    for (int l = 0; l < cfg.tnp_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      for (const char* gate : {"q", "k", "v", "out"}) {
        spec.push_back({p + "attn." + gate + "_weight", {h, h}});
        spec.push_back({p + "attn." + gate + "_bias", {h}});
      }
      spec.push_back({p + "norm1.gain", {h}});
      spec.push_back({p + "norm1.bias", {h}});
      spec.push_back({p + "ffn.w1", {h, h}});
      spec.push_back({p + "ffn.b1", {h}});
      spec.push_back({p + "ffn.w2", {h, h}});
      spec.push_back({p + "ffn.b2", {h}});
      spec.push_back({p + "norm2.gain", {h}});
      spec.push_back({p + "norm2.bias", {h}});
    }
    spec.push_back({"head.w1", {h, h}});
    spec.push_back({"head.b1", {h}});
    spec.push_back({"head.w2", {h, 2 * cfg.d_v}});
    spec.push_back({"head.b2", {2 * cfg.d_v}});
  }
  return spec;
}

template <class T>
NeuralProcessT<T> NeuralProcessT<T>::init(NpKind kind, const NpConfig& cfg, uint64_t seed) {
  cfg.validate();
  NeuralProcessT<T> model;
  model.kind = kind;
  model.config = cfg;
  Rng rng(Rng::mix(seed, kind == NpKind::kCnp ? 0xC27 : 0x727));
  for (const auto& [name, shape] : np_param_spec(kind, cfg)) {
    TensorT<T> t;
    if (shape.size() == 2 && name != "role.weight") {
      t = xavier_init<T>(shape[0], shape[1], rng);
    } else {
      t = TensorT<T>(shape, T(0));  // role embeddings start at zero
      if (name.find("norm") != std::string::npos && name.ends_with("gain"))
        std::fill(t.data.begin(), t.data.end(), T(1));
    }
    model.params.emplace_back(name, std::move(t));
  }
  return model;
}

template <class T>
ParameterT<T>& NeuralProcessT<T>::param(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw StateError("unknown parameter: " + name);
}

template <class T>
int64_t NeuralProcessT<T>::param_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

template <class T>
std::pair<Var, Var> NeuralProcessT<T>::forward(TapeT<T>& tape,
                                               const std::vector<double>& context,
                                               int num_context,
                                               const std::vector<double>& target_coords,
                                               int num_targets) {
  const int in = config.d_x + config.d_v;
  if (static_cast<int>(context.size()) != num_context * in)
    throw DimensionError("np forward: context size mismatch");
  if (static_cast<int>(target_coords.size()) != num_targets * config.d_x)
    throw DimensionError("np forward: target size mismatch");
  if (num_context < 1 || num_targets < 1)
    throw DataError("np forward: needs at least one context and one target");

  auto linear = [&](Var x, const std::string& w, const std::string& b) {
    return tape.add_row_bias(tape.matmul(x, tape.leaf(param(w))), tape.leaf(param(b)));
  };

  Var raw;  // [n x 2 d_v]
  if (kind == NpKind::kCnp) {
    TensorT<T> ctx({num_context, in});
    for (int64_t i = 0; i < ctx.numel(); ++i)
      ctx[i] = static_cast<T>(context[static_cast<size_t>(i)]);
    Var x = tape.constant(std::move(ctx));
    for (int l = 0; l < config.cnp_encoder_layers; ++l) {
      x = linear(x, "enc." + std::to_string(l) + ".weight",
                 "enc." + std::to_string(l) + ".bias");
      if (l + 1 < config.cnp_encoder_layers) x = tape.gelu(x);
    }
    Var pooled = tape.repeat_rows(tape.mean_rows(x), num_targets);
    TensorT<T> tc({num_targets, config.d_x});
    for (int64_t i = 0; i < tc.numel(); ++i)
      tc[i] = static_cast<T>(target_coords[static_cast<size_t>(i)]);
    Var y = tape.concat_cols(pooled, tape.constant(std::move(tc)));
    for (int l = 0; l < config.cnp_decoder_layers; ++l) {
      y = linear(y, "dec." + std::to_string(l) + ".weight",
                 "dec." + std::to_string(l) + ".bias");
      if (l + 1 < config.cnp_decoder_layers) y = tape.gelu(y);
    }
    raw = y;
  } else {
    // TNP: context tokens [x, v] and query tokens [x, 0], projected and
    // shifted by a learned role embedding, then full bidirectional attention.
    const int s = num_context + num_targets;
    TensorT<T> tokens({s, in});
    TensorT<T> onehot({s, 2});
    for (int i = 0; i < num_context; ++i) {
      for (int j = 0; j < in; ++j)
        tokens.at(i, j) = static_cast<T>(context[static_cast<size_t>(i) * in + j]);
      onehot.at(i, 0) = T(1);
    }
    for (int i = 0; i < num_targets; ++i) {
      const int row = num_context + i;
      for (int k = 0; k < config.d_x; ++k)
        tokens.at(row, k) =
            static_cast<T>(target_coords[static_cast<size_t>(i) * config.d_x + k]);
      onehot.at(row, 1) = T(1);
    }
    Var x = linear(tape.constant(std::move(tokens)), "input.weight", "input.bias");
    Var roles = tape.matmul(tape.constant(std::move(onehot)),
                            tape.leaf(param("role.weight")));
    x = tape.add(x, roles);

    const BoolMatrix full(s, s, true);
    const int dh = config.hidden / config.tnp_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const T eps = T(1e-5);
    for (int l = 0; l < config.tnp_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Var q = tape.split_heads(linear(x, p + "attn.q_weight", p + "attn.q_bias"),
                               config.tnp_heads);
      Var k = tape.split_heads(linear(x, p + "attn.k_weight", p + "attn.k_bias"),
                               config.tnp_heads);
      Var v = tape.split_heads(linear(x, p + "attn.v_weight", p + "attn.v_bias"),
                               config.tnp_heads);
      Var probs = tape.masked_softmax(tape.attention_scores(q, k, scale), full);
      Var mixed = tape.merge_heads(tape.attention_mix(probs, v));
      Var attn = linear(mixed, p + "attn.out_weight", p + "attn.out_bias");
      x = tape.layer_norm(tape.add(x, attn), tape.leaf(param(p + "norm1.gain")),
                          tape.leaf(param(p + "norm1.bias")), eps);
      Var hdn = tape.gelu(linear(x, p + "ffn.w1", p + "ffn.b1"));
      Var f = linear(hdn, p + "ffn.w2", p + "ffn.b2");
      x = tape.layer_norm(tape.add(x, f), tape.leaf(param(p + "norm2.gain")),
                          tape.leaf(param(p + "norm2.bias")), eps);
    }
    Var queries = tape.slice_rows(x, num_context, s);
    raw = linear(tape.gelu(linear(queries, "head.w1", "head.b1")), "head.w2", "head.b2");
  }

  Var mean = tape.slice_cols(raw, 0, config.d_v);
  Var sigma_raw = tape.slice_cols(raw, config.d_v, 2 * config.d_v);
  Var sigma = tape.affine(tape.softplus(sigma_raw), T(0.9), T(0.1));
  return {mean, sigma};
}

template struct NeuralProcessT<float>;
template struct NeuralProcessT<double>;

// ---------------------------------------------------------------------------
// training

namespace {

struct SequenceDraw {
  std::vector<double> context;
  int num_context = 0;
  std::vector<double> target_coords;
  std::vector<float> target_values;
  int num_targets = 0;
};

SequenceDraw draw_sequence(const Snapshot& snap, const ObservationSplit& split,
                           const NormalizationStats& stats, const NpConfig& cfg,
                           Rng& rng) {
  SequenceDraw d;
  std::vector<int> ctx = split.observed;
  if (cfg.max_context_per_batch > 0 &&
      static_cast<int>(ctx.size()) > cfg.max_context_per_batch) {
    ctx = rng.sample_without_replacement(ctx, cfg.max_context_per_batch);
    std::sort(ctx.begin(), ctx.end());
  }
  std::vector<int> qry = split.query;
  if (static_cast<int>(qry.size()) > cfg.max_queries_per_batch) {
    qry = rng.sample_without_replacement(qry, cfg.max_queries_per_batch);
    std::sort(qry.begin(), qry.end());
  }
  std::vector<int> targets = qry;
  if (cfg.include_context_as_targets)
    targets.insert(targets.end(), ctx.begin(), ctx.end());

  const int in = cfg.d_x + cfg.d_v;
  d.num_context = static_cast<int>(ctx.size());
  d.context.resize(static_cast<size_t>(d.num_context) * in);
  for (int i = 0; i < d.num_context; ++i) {
    const int p = ctx[static_cast<size_t>(i)];
    for (int k = 0; k < cfg.d_x; ++k)
      d.context[static_cast<size_t>(i) * in + k] =
          (snap.coord(p, k) - stats.coord_mean[static_cast<size_t>(k)]) /
          stats.coord_std[static_cast<size_t>(k)];
    for (int c = 0; c < cfg.d_v; ++c)
      d.context[static_cast<size_t>(i) * in + cfg.d_x + c] =
          (snap.value(p, c) - stats.value_mean[static_cast<size_t>(c)]) /
          stats.value_std[static_cast<size_t>(c)];
  }
  d.num_targets = static_cast<int>(targets.size());
  d.target_coords.resize(static_cast<size_t>(d.num_targets) * cfg.d_x);
  d.target_values.resize(static_cast<size_t>(d.num_targets) * cfg.d_v);
  for (int i = 0; i < d.num_targets; ++i) {
    const int p = targets[static_cast<size_t>(i)];
    for (int k = 0; k < cfg.d_x; ++k)
      d.target_coords[static_cast<size_t>(i) * cfg.d_x + k] =
          (snap.coord(p, k) - stats.coord_mean[static_cast<size_t>(k)]) /
          stats.coord_std[static_cast<size_t>(k)];
    for (int c = 0; c < cfg.d_v; ++c)
      d.target_values[static_cast<size_t>(i) * cfg.d_v + c] = static_cast<float>(
          (snap.value(p, c) - stats.value_mean[static_cast<size_t>(c)]) /
          stats.value_std[static_cast<size_t>(c)]);
  }
  return d;
}

}  // namespace

NpTrainResult np_train(NeuralProcess& model, const Dataset& train_set,
                       const std::vector<ObservationSplit>& splits,
                       const NormalizationStats& stats) {
  const NpConfig& cfg = model.config;
  if (train_set.snapshots.empty()) throw DataError("np_train: empty training set");
  if (splits.size() != train_set.snapshots.size())
    throw DataError("np_train: need one split per training snapshot");
  int steps_per_epoch = cfg.steps_per_epoch;
  if (steps_per_epoch <= 0) {
    int64_t total_points = 0;
    for (const auto& s : train_set.snapshots) total_points += s.num_points();
    const int64_t per_step =
        static_cast<int64_t>(cfg.batch_size) * cfg.max_queries_per_batch;
    steps_per_epoch =
        static_cast<int>(std::max<int64_t>(1, (total_points + per_step - 1) / per_step));
  }
  AdamState opt = AdamState::init(model.params);
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  if (model.kind == NpKind::kTnp) adam.weight_decay = cfg.weight_decay;

  NpTrainResult result;
  Tape tape;
  const int num_snaps = static_cast<int>(train_set.snapshots.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int step = 0; step < steps_per_epoch; ++step) {
      const int64_t global_step = static_cast<int64_t>(epoch) * steps_per_epoch + step;
      Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(global_step)));
      double step_loss = 0.0;
      int snap_index = -1;
      try {
        for (int b = 0; b < cfg.batch_size; ++b) {
          const int si = rng.uniform_int(num_snaps);
          const Snapshot& snap = train_set.snapshots[static_cast<size_t>(si)];
          snap_index = snap.index;
          SequenceDraw d = draw_sequence(snap, splits[static_cast<size_t>(si)], stats,
                                         cfg, rng);
          tape.reset();
          auto [mean, sigma] = model.forward(tape, d.context, d.num_context,
                                             d.target_coords, d.num_targets);
          Tensor truth = Tensor::from({d.num_targets, cfg.d_v},
                                      std::vector<float>(d.target_values));
          Var loss = tape.gaussian_nll(mean, sigma, truth);
          const float lv = tape.value(loss)[0];
          if (!std::isfinite(lv)) throw NumericalError("loss is not finite");
          step_loss += lv;
          tape.backward(loss, 1.0f / static_cast<float>(cfg.batch_size));
        }
      } catch (const NumericalError& e) {
        throw NumericalError("np training aborted at step " +
                             std::to_string(global_step) + " (snapshot " +
                             std::to_string(snap_index) + "): " + e.what());
      }
      adam_step(model.params, opt, adam);
      result.loss_history.push_back(step_loss / cfg.batch_size);
    }
  }
  return result;
}

std::vector<double> np_reconstruct(NeuralProcess& model, const Snapshot& snap,
                                   const ObservationSplit& split,
                                   const NormalizationStats& stats) {
  split.validate(snap.num_points());
  const NpConfig& cfg = model.config;
  std::vector<int> ctx = split.observed;
  if (cfg.max_context_per_batch > 0 &&
      static_cast<int>(ctx.size()) > cfg.max_context_per_batch) {
    Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(snap.index)));
    ctx = rng.sample_without_replacement(ctx, cfg.max_context_per_batch);
    std::sort(ctx.begin(), ctx.end());
  }
  const int in = cfg.d_x + cfg.d_v;
  const int m = static_cast<int>(ctx.size());
  std::vector<double> context(static_cast<size_t>(m) * in);
  for (int i = 0; i < m; ++i) {
    const int p = ctx[static_cast<size_t>(i)];
    for (int k = 0; k < cfg.d_x; ++k)
      context[static_cast<size_t>(i) * in + k] =
          (snap.coord(p, k) - stats.coord_mean[static_cast<size_t>(k)]) /
          stats.coord_std[static_cast<size_t>(k)];
    for (int c = 0; c < cfg.d_v; ++c)
      context[static_cast<size_t>(i) * in + cfg.d_x + c] =
          (snap.value(p, c) - stats.value_mean[static_cast<size_t>(c)]) /
          stats.value_std[static_cast<size_t>(c)];
  }
  const int n = split.num_query();
  std::vector<double> out(static_cast<size_t>(n) * cfg.d_v, 0.0);
  Tape tape;
  const int chunk = cfg.max_queries_per_batch;
  for (int begin = 0; begin < n; begin += chunk) {
    const int end = std::min(n, begin + chunk);
    const int nt = end - begin;
    std::vector<double> coords(static_cast<size_t>(nt) * cfg.d_x);
    for (int i = 0; i < nt; ++i) {
      const int p = split.query[static_cast<size_t>(begin + i)];
      for (int k = 0; k < cfg.d_x; ++k)
        coords[static_cast<size_t>(i) * cfg.d_x + k] =
            (snap.coord(p, k) - stats.coord_mean[static_cast<size_t>(k)]) /
            stats.coord_std[static_cast<size_t>(k)];
    }
    tape.reset();
    auto [mean, sigma] = model.forward(tape, context, m, coords, nt);
    (void)sigma;
    const Tensor& M = tape.value(mean);
    for (int i = 0; i < nt; ++i)
      for (int c = 0; c < cfg.d_v; ++c)
        out[static_cast<size_t>(begin + i) * cfg.d_v + c] =
            static_cast<double>(M.at(i, c)) * stats.value_std[static_cast<size_t>(c)] +
            stats.value_mean[static_cast<size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization

json np_config_to_json(const NpConfig& cfg) {
  return json{{"hidden", cfg.hidden},
              {"cnp_encoder_layers", cfg.cnp_encoder_layers},
              {"cnp_decoder_layers", cfg.cnp_decoder_layers},
              {"tnp_layers", cfg.tnp_layers},
              {"tnp_heads", cfg.tnp_heads},
              {"learning_rate", cfg.learning_rate},
              {"weight_decay", cfg.weight_decay},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs},
              {"max_queries_per_batch", cfg.max_queries_per_batch},
              {"max_context_per_batch", cfg.max_context_per_batch},
              {"include_context_as_targets", cfg.include_context_as_targets},
              {"steps_per_epoch", cfg.steps_per_epoch},
              {"seed", cfg.seed},
              {"d_x", cfg.d_x},
              {"d_v", cfg.d_v}};
}

NpConfig np_config_from_json(const json& j) {
  NpConfig cfg;
  cfg.hidden = j.at("hidden").get<int>();
  cfg.cnp_encoder_layers = j.at("cnp_encoder_layers").get<int>();
  cfg.cnp_decoder_layers = j.at("cnp_decoder_layers").get<int>();
  cfg.tnp_layers = j.at("tnp_layers").get<int>();
  cfg.tnp_heads = j.at("tnp_heads").get<int>();
  cfg.learning_rate = j.at("learning_rate").get<float>();
  cfg.weight_decay = j.at("weight_decay").get<float>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.max_queries_per_batch = j.at("max_queries_per_batch").get<int>();
  cfg.max_context_per_batch = j.at("max_context_per_batch").get<int>();
  cfg.include_context_as_targets = j.at("include_context_as_targets").get<bool>();
  cfg.steps_per_epoch = j.at("steps_per_epoch").get<int>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.d_x = j.at("d_x").get<int>();
  cfg.d_v = j.at("d_v").get<int>();
  cfg.validate();
  return cfg;
}

Checkpoint np_make_checkpoint(const NeuralProcess& model, const NormalizationStats& stats,
                              const json& metadata) {
  Checkpoint ck;
  ck.kind = model.kind == NpKind::kCnp ? "cnp" : "tnp";
  ck.config = np_config_to_json(model.config);
  ck.stats = stats;
  ck.metadata = metadata;
  ck.params = model.params;
  for (auto& p : ck.params) p.zero_grad();
  return ck;
}

NeuralProcess np_from_checkpoint(const Checkpoint& ck, NormalizationStats* stats_out) {
  NpKind kind;
  if (ck.kind == "cnp") kind = NpKind::kCnp;
  else if (ck.kind == "tnp") kind = NpKind::kTnp;
  else throw DataError("checkpoint kind '" + ck.kind + "' is not a neural process");
  const NpConfig cfg = np_config_from_json(ck.config);
  NeuralProcess model;
  model.kind = kind;
  model.config = cfg;
  const auto spec = np_param_spec(kind, cfg);
  if (spec.size() != ck.params.size())
    throw DataError("checkpoint parameter set does not match its config");
  for (const auto& [name, shape] : spec) {
    const Parameter* p = ck.find(name);
    if (!p || p->value.shape != shape)
      throw DataError("checkpoint parameter '" + name + "' missing or misshaped");
    model.params.emplace_back(name, p->value);
  }
  if (stats_out) *stats_out = ck.stats;
  return model;
}

}  // namespace recon
