#include "recon/rformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

using nlohmann::json;

namespace recon {

void ModelConfig::validate() const {
  if (num_layers < 1) throw ConfigError("model: num_layers must be >= 1");
  if (num_heads < 1 || d_token % num_heads != 0)
    throw ConfigError("model: d_token must be divisible by num_heads");
  if (max_seq_len < 2) throw ConfigError("model: max_seq_len must be >= 2");
  if (d_x < 1 || d_x > 3) throw ConfigError("model: d_x must be 1, 2 or 3");
  if (d_v < 1) throw ConfigError("model: d_v must be >= 1");
  if (ffn_hidden < 1 || head_hidden < 1)
    throw ConfigError("model: hidden widths must be >= 1");
}

int TokenSequence::num_obs() const {
  int m = 0;
  for (TokenRole r : roles)
    if (r == TokenRole::kObs) ++m;
  return m;
}

// ---------------------------------------------------------------------------
// tokens + mask

TokenSequence build_tokens_from_indices(const Snapshot& snap,
                                        const NormalizationStats& stats,
                                        const std::vector<int>& obs_indices,
                                        const std::vector<int>& query_indices,
                                        int real_queries, const ModelConfig& cfg) {
  const int m = static_cast<int>(obs_indices.size());
  const int n = static_cast<int>(query_indices.size());
  const int s = m + n;
  if (s > cfg.max_seq_len)
    throw DataError("sequence of " + std::to_string(s) + " tokens exceeds max_seq_len " +
                    std::to_string(cfg.max_seq_len) + "; process queries in chunks");
  TokenSequence seq;
  seq.d_x = snap.d_x;
  seq.d_v = snap.d_v;
  const int w = snap.d_x + snap.d_v;
  seq.tokens.assign(static_cast<size_t>(s) * w, 0.0);
  seq.roles.resize(static_cast<size_t>(s));
  seq.origin.resize(static_cast<size_t>(s));
  auto put_coords = [&](int row, int point) {
    for (int k = 0; k < snap.d_x; ++k)
      seq.token(row)[k] = (snap.coord(point, k) - stats.coord_mean[static_cast<size_t>(k)]) /
                          stats.coord_std[static_cast<size_t>(k)];
  };
  for (int i = 0; i < m; ++i) {
    const int p = obs_indices[static_cast<size_t>(i)];
    put_coords(i, p);
    for (int c = 0; c < snap.d_v; ++c)
      seq.token(i)[snap.d_x + c] =
          (snap.value(p, c) - stats.value_mean[static_cast<size_t>(c)]) /
          stats.value_std[static_cast<size_t>(c)];
    seq.roles[static_cast<size_t>(i)] = TokenRole::kObs;
    seq.origin[static_cast<size_t>(i)] = p;
  }
  for (int j = 0; j < n; ++j) {
    const int row = m + j;
    const int p = query_indices[static_cast<size_t>(j)];
    put_coords(row, p);
    // value channels stay exactly zero
    seq.roles[static_cast<size_t>(row)] = TokenRole::kQuery;
    seq.origin[static_cast<size_t>(row)] = j < real_queries ? p : -1;
  }
  return seq;
}

TokenSequence build_tokens(const Snapshot& snap, const ObservationSplit& split,
                           const NormalizationStats& stats, const ModelConfig& cfg) {
  split.validate(snap.num_points());
  return build_tokens_from_indices(snap, stats, split.observed, split.query,
                                   static_cast<int>(split.query.size()), cfg);
}

AttentionMask build_mask(const std::vector<TokenRole>& roles) {
  const int s = static_cast<int>(roles.size());
  if (s == 0) throw DataError("build_mask: empty role sequence");
  bool any_obs = false;
  for (TokenRole r : roles) any_obs = any_obs || (r == TokenRole::kObs);
  if (!any_obs) throw DataError("build_mask: sequence has no observation tokens");
  AttentionMask mask;
  mask.allowed = BoolMatrix(s, s, false);
  for (int i = 0; i < s; ++i) {
    if (roles[static_cast<size_t>(i)] == TokenRole::kQuery) {
      for (int j = 0; j < s; ++j)
        if (roles[static_cast<size_t>(j)] == TokenRole::kObs) mask.allowed.at(i, j) = 1;
      mask.allowed.at(i, i) = 1;
    } else {
      for (int j = 0; j <= i; ++j)
        if (roles[static_cast<size_t>(j)] == TokenRole::kObs) mask.allowed.at(i, j) = 1;
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// model

std::vector<std::pair<std::string, std::vector<int>>> rformer_param_spec(
    const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<int>>> spec;
  const int d = cfg.d_token;
  spec.push_back({"embed.weight", {cfg.token_width(), d}});
  spec.push_back({"embed.bias", {d}});
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* gate : {"q", "k", "v", "out"}) {
      spec.push_back({p + "attn." + gate + "_weight", {d, d}});
      spec.push_back({p + "attn." + gate + "_bias", {d}});
    }
    spec.push_back({p + "norm1.gain", {d}});
    spec.push_back({p + "norm1.bias", {d}});
    spec.push_back({p + "ffn.w1", {d, cfg.ffn_hidden}});
    spec.push_back({p + "ffn.b1", {cfg.ffn_hidden}});
    spec.push_back({p + "ffn.w2", {cfg.ffn_hidden, d}});
    spec.push_back({p + "ffn.b2", {d}});
    spec.push_back({p + "norm2.gain", {d}});
    spec.push_back({p + "norm2.bias", {d}});
  }
  spec.push_back({"head.w1", {d, cfg.head_hidden}});
  spec.push_back({"head.b1", {cfg.head_hidden}});
  spec.push_back({"head.w2", {cfg.head_hidden, cfg.d_v}});
  spec.push_back({"head.b2", {cfg.d_v}});
  return spec;
}

template <class T>
RFormerModelT<T> RFormerModelT<T>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  RFormerModelT<T> model;
  model.config = cfg;
  Rng rng(Rng::mix(seed, 0x5EED));
  for (const auto& [name, shape] : rformer_param_spec(cfg)) {
    TensorT<T> t;
    if (shape.size() == 2) {
      t = xavier_init<T>(shape[0], shape[1], rng);
    } else {
      t = TensorT<T>(shape, T(0));
      if (name.find("norm") != std::string::npos && name.ends_with("gain"))
        std::fill(t.data.begin(), t.data.end(), T(1));
    }
    model.params.emplace_back(name, std::move(t));
  }
  return model;
}

template <class T>
ParameterT<T>& RFormerModelT<T>::param(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw StateError("unknown parameter: " + name);
}

template <class T>
int64_t RFormerModelT<T>::param_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

template <class T>
Var RFormerModelT<T>::forward(TapeT<T>& tape, const TokenSequence& seq,
                              const AttentionMask& mask) {
  const int s = seq.size();
  const int m = seq.num_obs();
  const int n = s - m;
  if (n < 1) throw DataError("forward: sequence has no query tokens");
  if (seq.d_x != config.d_x || seq.d_v != config.d_v)
    throw DimensionError("forward: token width does not match model config");
  for (int i = 0; i < s; ++i) {
    const bool is_obs = seq.roles[static_cast<size_t>(i)] == TokenRole::kObs;
    if (is_obs != (i < m))
      throw DataError("forward: sequence must be observation-first");
  }
  if (mask.allowed.rows != s || mask.allowed.cols != s)
    throw DimensionError("forward: mask size does not match sequence");

  TensorT<T> input({s, config.token_width()});
  for (int64_t i = 0; i < input.numel(); ++i)
    input[i] = static_cast<T>(seq.tokens[static_cast<size_t>(i)]);
  Var x = tape.constant(std::move(input));

  auto linear = [&](Var in, const std::string& w, const std::string& b) {
    return tape.add_row_bias(tape.matmul(in, tape.leaf(param(w))), tape.leaf(param(b)));
  };

  x = linear(x, "embed.weight", "embed.bias");  // no positional encoding
  const T eps = T(1e-5);
  const int dh = config.d_token / config.num_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Var q = tape.split_heads(linear(x, p + "attn.q_weight", p + "attn.q_bias"),
                             config.num_heads);
    Var k = tape.split_heads(linear(x, p + "attn.k_weight", p + "attn.k_bias"),
                             config.num_heads);
    Var v = tape.split_heads(linear(x, p + "attn.v_weight", p + "attn.v_bias"),
                             config.num_heads);
    Var probs = tape.masked_softmax(tape.attention_scores(q, k, scale), mask.allowed);
    Var mixed = tape.merge_heads(tape.attention_mix(probs, v));
    Var attn = linear(mixed, p + "attn.out_weight", p + "attn.out_bias");
    x = tape.layer_norm(tape.add(x, attn), tape.leaf(param(p + "norm1.gain")),
                        tape.leaf(param(p + "norm1.bias")), eps);
    Var h = tape.gelu(linear(x, p + "ffn.w1", p + "ffn.b1"));
    Var f = linear(h, p + "ffn.w2", p + "ffn.b2");
    x = tape.layer_norm(tape.add(x, f), tape.leaf(param(p + "norm2.gain")),
                        tape.leaf(param(p + "norm2.bias")), eps);
  }
  Var queries = tape.slice_rows(x, m, s);
  Var hidden = tape.gelu(linear(queries, "head.w1", "head.b1"));
  return linear(hidden, "head.w2", "head.b2");
}

template struct RFormerModelT<float>;
template struct RFormerModelT<double>;

// ---------------------------------------------------------------------------
// serialization

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"num_layers", cfg.num_layers},   {"num_heads", cfg.num_heads},
              {"d_token", cfg.d_token},         {"ffn_hidden", cfg.ffn_hidden},
              {"head_hidden", cfg.head_hidden}, {"max_seq_len", cfg.max_seq_len},
              {"d_x", cfg.d_x},                 {"d_v", cfg.d_v}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.num_layers = j.at("num_layers").get<int>();
  cfg.num_heads = j.at("num_heads").get<int>();
  cfg.d_token = j.at("d_token").get<int>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
  cfg.head_hidden = j.at("head_hidden").get<int>();
  cfg.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.d_x = j.at("d_x").get<int>();
  cfg.d_v = j.at("d_v").get<int>();
  cfg.validate();
  return cfg;
}

Checkpoint make_checkpoint(const RFormerModel& model, const NormalizationStats& stats,
                           const json& metadata, const AdamState* optimizer_state) {
  Checkpoint ck;
  ck.kind = "rformer";
  ck.config = model_config_to_json(model.config);
  ck.stats = stats;
  ck.metadata = metadata;
  ck.params = model.params;
  for (auto& p : ck.params) p.zero_grad();
  if (optimizer_state) {
    ck.metadata["optimizer_step"] = optimizer_state->step;
    for (size_t i = 0; i < model.params.size(); ++i) {
      ck.params.emplace_back("opt.m." + model.params[i].name,
                             optimizer_state->first_moment[i]);
      ck.params.emplace_back("opt.v." + model.params[i].name,
                             optimizer_state->second_moment[i]);
    }
  }
  return ck;
}

RFormerModel model_from_checkpoint(const Checkpoint& ck, NormalizationStats* stats_out,
                                   AdamState* optimizer_state_out) {
  if (ck.kind != "rformer")
    throw DataError("checkpoint kind '" + ck.kind + "' is not an rformer model");
  const ModelConfig cfg = model_config_from_json(ck.config);
  RFormerModel model;
  model.config = cfg;
  const auto spec = rformer_param_spec(cfg);
  for (const auto& [name, shape] : spec) {
    const Parameter* p = ck.find(name);
    if (!p) throw DataError("checkpoint is missing parameter '" + name + "'");
    if (p->value.shape != shape)
      throw DataError("checkpoint parameter '" + name + "' has shape " +
                      p->value.shape_str() + ", expected " +
                      Tensor(shape).shape_str());
    model.params.emplace_back(name, p->value);
  }
  // Reject checkpoints whose model-parameter set does not match the config.
  size_t model_params_in_ck = 0;
  for (const auto& p : ck.params)
    if (p.name.rfind("opt.", 0) != 0) ++model_params_in_ck;
  if (model_params_in_ck != spec.size())
    throw DataError("checkpoint parameter set does not match its config");
  if (stats_out) *stats_out = ck.stats;
  if (optimizer_state_out) {
    *optimizer_state_out = AdamState::init(model.params);
    if (ck.metadata.contains("optimizer_step")) {
      optimizer_state_out->step = ck.metadata.at("optimizer_step").get<int64_t>();
      for (size_t i = 0; i < model.params.size(); ++i) {
        const Parameter* m = ck.find("opt.m." + model.params[i].name);
        const Parameter* v = ck.find("opt.v." + model.params[i].name);
        if (!m || !v) throw DataError("checkpoint optimizer state is incomplete");
        optimizer_state_out->first_moment[i] = m->value;
        optimizer_state_out->second_moment[i] = v->value;
      }
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// training

int default_steps_per_epoch(const Dataset& train_set, const TrainConfig& cfg) {
  int64_t total_points = 0;
  for (const auto& s : train_set.snapshots) total_points += s.num_points();
  const int64_t per_step =
      static_cast<int64_t>(cfg.batch_size) * std::max(1, cfg.query_per_sequence);
  return static_cast<int>(std::max<int64_t>(1, (total_points + per_step - 1) / per_step));
}

TrainResult train(RFormerModel& model, const Dataset& train_set,
                  const std::vector<ObservationSplit>& splits,
                  const NormalizationStats& stats, const TrainConfig& cfg,
                  AdamState* optimizer_state,
                  const std::vector<double>* previous_losses) {
  if (train_set.snapshots.empty()) throw DataError("train: empty training set");
  if (splits.size() != train_set.snapshots.size())
    throw DataError("train: need one observation split per training snapshot");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  const int num_snaps = static_cast<int>(train_set.snapshots.size());
  const int steps_per_epoch = cfg.steps_per_epoch > 0
                                  ? cfg.steps_per_epoch
                                  : default_steps_per_epoch(train_set, cfg);

  AdamState fresh_state;
  AdamState& opt = optimizer_state ? *optimizer_state : fresh_state;
  if (opt.first_moment.empty()) opt = AdamState::init(model.params);
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;

  TrainResult result;
  if (previous_losses) result.loss_history = *previous_losses;
  result.epochs_completed = cfg.start_epoch;

  Tape tape;
  for (int epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    for (int step = 0; step < steps_per_epoch; ++step) {
      const int64_t global_step =
          static_cast<int64_t>(epoch) * steps_per_epoch + step;
      Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(global_step)));
      double step_loss = 0.0;
      int snap_index = -1;
      try {
        for (int b = 0; b < cfg.batch_size; ++b) {
          const int si = rng.uniform_int(num_snaps);
          const Snapshot& snap = train_set.snapshots[static_cast<size_t>(si)];
          snap_index = snap.index;
          const ObservationSplit& split = splits[static_cast<size_t>(si)];
          int mb = std::min(cfg.obs_per_sequence, split.num_observed());
          int nb = std::min(cfg.query_per_sequence, split.num_query());
          if (mb + nb > model.config.max_seq_len)
            nb = model.config.max_seq_len - mb;
          if (nb < 1)
            throw ConfigError("train: obs_per_sequence leaves no room for queries");
          std::vector<int> obs = rng.sample_without_replacement(split.observed, mb);
          std::sort(obs.begin(), obs.end());
          std::vector<int> qry = rng.sample_without_replacement(split.query, nb);
          std::sort(qry.begin(), qry.end());
          TokenSequence seq =
              build_tokens_from_indices(snap, stats, obs, qry, nb, model.config);
          if (cfg.noise_scale > 0.0) {
            // Values are standardized by the training std, so noise at
            // `scale` times the per-component std is N(0, scale^2) here.
            for (int i = 0; i < mb; ++i)
              for (int c = 0; c < seq.d_v; ++c)
                seq.token(i)[seq.d_x + c] += rng.normal() * cfg.noise_scale;
          }
          const AttentionMask mask = build_mask(seq.roles);
          tape.reset();
          Var preds = model.forward(tape, seq, mask);
          Tensor truth({nb, snap.d_v});
          for (int j = 0; j < nb; ++j)
            for (int c = 0; c < snap.d_v; ++c)
              truth.at(j, c) = static_cast<float>(
                  (snap.value(qry[static_cast<size_t>(j)], c) -
                   stats.value_mean[static_cast<size_t>(c)]) /
                  stats.value_std[static_cast<size_t>(c)]);
          Var loss = tape.relative_rmse(preds, truth);
          const float lv = tape.value(loss)[0];
          if (!std::isfinite(lv)) throw NumericalError("loss is not finite");
          step_loss += lv;
          tape.backward(loss, 1.0f / static_cast<float>(cfg.batch_size));
        }
      } catch (const NumericalError& e) {
        throw NumericalError("training aborted at step " + std::to_string(global_step) +
                             " (snapshot " + std::to_string(snap_index) +
                             "): " + e.what());
      }
      adam_step(model.params, opt, adam);
      result.loss_history.push_back(step_loss / cfg.batch_size);
    }
    result.epochs_completed = epoch + 1;
    if (!cfg.checkpoint_path.empty()) {
      json meta{{"epoch", epoch + 1},
                {"seed", cfg.seed},
                {"steps_per_epoch", steps_per_epoch},
                {"loss_history", result.loss_history}};
      make_checkpoint(model, stats, meta, &opt).save(cfg.checkpoint_path);
    }
    if (cfg.verbose) {
      double recent = 0.0;
      int count = std::min<int>(steps_per_epoch, static_cast<int>(result.loss_history.size()));
      for (int i = 0; i < count; ++i)
        recent += result.loss_history[result.loss_history.size() - 1 - i];
      std::fprintf(stderr, "epoch %d/%d  loss %.6f\n", epoch + 1, cfg.epochs,
                   recent / std::max(1, count));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// chunked inference

std::vector<double> reconstruct_chunked(RFormerModel& model, const Snapshot& snap,
                                        const ObservationSplit& split,
                                        const NormalizationStats& stats,
                                        int chunk_budget) {
  split.validate(snap.num_points());
  const int m = split.num_observed();
  const int n = split.num_query();
  if (m > model.config.max_seq_len - 1)
    throw DataError("reconstruct_chunked: " + std::to_string(m) +
                    " observation tokens leave no room for queries (max_seq_len " +
                    std::to_string(model.config.max_seq_len) + ")");
  if (chunk_budget < 1) throw ConfigError("reconstruct_chunked: chunk budget must be >= 1");
  const int chunk = std::min({chunk_budget, model.config.max_seq_len - m, n});
  const int num_chunks = (n + chunk - 1) / chunk;

  std::vector<double> out(static_cast<size_t>(snap.num_points()) * snap.d_v,
                          std::numeric_limits<double>::quiet_NaN());
  Tape tape;
  for (int c = 0; c < num_chunks; ++c) {
    const int begin = c * chunk;
    const int end = std::min(n, begin + chunk);
    std::vector<int> qry(split.query.begin() + begin, split.query.begin() + end);
    const int real = static_cast<int>(qry.size());
    // Final short chunk: pad with copies of the first query point; padded
    // outputs are discarded below.
    while (static_cast<int>(qry.size()) < chunk) qry.push_back(split.query.front());
    TokenSequence seq = build_tokens_from_indices(snap, stats, split.observed, qry,
                                                  real, model.config);
    const AttentionMask mask = build_mask(seq.roles);
    tape.reset();
    Var preds = model.forward(tape, seq, mask);
    const Tensor& P = tape.value(preds);
    for (int j = 0; j < real; ++j) {
      const int point = qry[static_cast<size_t>(j)];
      for (int vc = 0; vc < snap.d_v; ++vc)
        out[static_cast<size_t>(point) * snap.d_v + vc] =
            static_cast<double>(P.at(j, vc)) * stats.value_std[static_cast<size_t>(vc)] +
            stats.value_mean[static_cast<size_t>(vc)];
    }
  }
  for (int i : split.observed)
    for (int vc = 0; vc < snap.d_v; ++vc)
      out[static_cast<size_t>(i) * snap.d_v + vc] = snap.value(i, vc);
  return out;
}

}  // namespace recon
