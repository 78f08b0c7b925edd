#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "grad_check.hpp"
#include "recon/rformer.hpp"

using namespace recon;

namespace {

NormalizationStats identity_stats(int d_x, int d_v) {
  NormalizationStats st;
  st.coord_mean.assign(static_cast<size_t>(d_x), 0.0);
  st.coord_std.assign(static_cast<size_t>(d_x), 1.0);
  st.value_mean.assign(static_cast<size_t>(d_v), 0.0);
  st.value_std.assign(static_cast<size_t>(d_v), 1.0);
  return st;
}

// Small scattered snapshot with a smooth field, d_x = 2, d_v = 1.
Snapshot toy_snapshot(int points, uint64_t seed) {
  Rng rng(seed);
  Snapshot s;
  s.d_x = 2;
  s.d_v = 1;
  s.index = 0;
  for (int i = 0; i < points; ++i) {
    const double x = rng.uniform(-1, 1);
    const double y = rng.uniform(-1, 1);
    s.coords.push_back(x);
    s.coords.push_back(y);
    s.values.push_back(std::sin(2 * x) + 0.5 * std::cos(3 * y));
  }
  return s;
}

ObservationSplit first_m_split(int total, int m) {
  ObservationSplit split;
  for (int i = 0; i < m; ++i) split.observed.push_back(i);
  for (int i = m; i < total; ++i) split.query.push_back(i);
  return split;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.d_token = 16;
  cfg.ffn_hidden = 16;
  cfg.head_hidden = 16;
  cfg.max_seq_len = 64;
  cfg.d_x = 2;
  cfg.d_v = 1;
  return cfg;
}

}  // namespace

TEST_CASE("token construction") {
  ModelConfig cfg = small_config();
  NormalizationStats st = identity_stats(2, 1);
  Snapshot s;
  s.d_x = 2;
  s.d_v = 1;
  s.coords = {0.5, -0.5, 0.5, -0.5, 1.0, 1.0, 2.0, 0.0};
  s.values = {2.0, 2.0, -1.0, 3.0};
  SUBCASE("observation token carries position and value") {
    ObservationSplit split = first_m_split(4, 2);
    TokenSequence seq = build_tokens(s, split, st, cfg);
    CHECK(seq.size() == 4);
    CHECK(seq.token(0)[0] == 0.5);
    CHECK(seq.token(0)[1] == -0.5);
    CHECK(seq.token(0)[2] == 2.0);
    CHECK(seq.roles[0] == TokenRole::kObs);
    CHECK(seq.origin[0] == 0);
  }
  SUBCASE("query token zeroes the value channel") {
    ObservationSplit split;
    split.observed = {0, 2, 3};
    split.query = {1};  // same position as point 0
    TokenSequence seq = build_tokens(s, split, st, cfg);
    const int row = 3;
    CHECK(seq.roles[row] == TokenRole::kQuery);
    CHECK(seq.token(row)[0] == 0.5);
    CHECK(seq.token(row)[1] == -0.5);
    CHECK(seq.token(row)[2] == 0.0);
  }
  SUBCASE("observation-first ordering") {
    ObservationSplit split = first_m_split(4, 2);
    TokenSequence seq = build_tokens(s, split, st, cfg);
    CHECK(seq.roles == std::vector<TokenRole>{TokenRole::kObs, TokenRole::kObs,
                                              TokenRole::kQuery, TokenRole::kQuery});
  }
  SUBCASE("over-long sequences direct the caller to chunking") {
    ModelConfig tiny = cfg;
    tiny.max_seq_len = 3;
    ObservationSplit split = first_m_split(4, 2);
    try {
      build_tokens(s, split, st, tiny);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("chunk") != std::string::npos);
    }
  }
}

TEST_CASE("mask construction") {
  using R = TokenRole;
  SUBCASE("two observations, two queries") {
    AttentionMask m = build_mask({R::kObs, R::kObs, R::kQuery, R::kQuery});
    // o1 -> {o1}; o2 -> {o1,o2}; q1 -> {o1,o2,q1}; q2 -> {o1,o2,q2}
    const uint8_t expect[4][4] = {
        {1, 0, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 0}, {1, 1, 0, 1}};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) CHECK(m.allowed.at(i, j) == expect[i][j]);
  }
  SUBCASE("single obs, single query") {
    AttentionMask m = build_mask({R::kObs, R::kQuery});
    CHECK(m.allowed.at(0, 0) == 1);
    CHECK(m.allowed.at(0, 1) == 0);
    CHECK(m.allowed.at(1, 0) == 1);
    CHECK(m.allowed.at(1, 1) == 1);
  }
  SUBCASE("all-observation sequence is lower triangular") {
    AttentionMask m = build_mask({R::kObs, R::kObs, R::kObs});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) CHECK(m.allowed.at(i, j) == (j <= i ? 1 : 0));
  }
  SUBCASE("exhaustive closed-form check up to length 8") {
    for (int len = 1; len <= 8; ++len) {
      for (int bits = 0; bits < (1 << len); ++bits) {
        std::vector<R> roles;
        bool any_obs = false;
        for (int i = 0; i < len; ++i) {
          const bool query = (bits >> i) & 1;
          roles.push_back(query ? R::kQuery : R::kObs);
          any_obs = any_obs || !query;
        }
        if (!any_obs) {
          CHECK_THROWS_AS(build_mask(roles), DataError);
          continue;
        }
        AttentionMask m = build_mask(roles);
        for (int i = 0; i < len; ++i) {
          bool row_any = false;
          for (int j = 0; j < len; ++j) {
            bool expect;
            if (roles[static_cast<size_t>(i)] == R::kQuery) {
              expect = roles[static_cast<size_t>(j)] == R::kObs || j == i;
            } else {
              expect = roles[static_cast<size_t>(j)] == R::kObs && j <= i;
            }
            CHECK(m.allowed.at(i, j) == (expect ? 1 : 0));
            row_any = row_any || expect;
          }
          CHECK(row_any);  // every row keeps at least one allowed entry
        }
      }
    }
  }
}

TEST_CASE("forward pass semantics") {
  ModelConfig cfg = small_config();
  NormalizationStats st = identity_stats(2, 1);
  Snapshot snap = toy_snapshot(12, 3);
  ObservationSplit split = first_m_split(12, 4);

  SUBCASE("all-zero parameters output the head bias everywhere") {
    RFormerModel model = RFormerModel::init(cfg, 1);
    for (auto& p : model.params)
      std::fill(p.value.data.begin(), p.value.data.end(), 0.0f);
    model.param("head.b2").value[0] = 0.625f;
    // layer_norm of a zero row is zero only through gain 0; zero gains make
    // the whole trunk emit zeros, so the head sees zeros and emits its bias.
    TokenSequence seq = build_tokens(snap, split, st, cfg);
    AttentionMask mask = build_mask(seq.roles);
    Tape tape;
    Var out = model.forward(tape, seq, mask);
    for (int64_t i = 0; i < tape.value(out).numel(); ++i)
      CHECK(tape.value(out)[i] == 0.625f);
  }

  SUBCASE("perturbing one query's value channel changes no other query") {
    RFormerModel model = RFormerModel::init(cfg, 7);
    TokenSequence seq = build_tokens(snap, split, st, cfg);
    AttentionMask mask = build_mask(seq.roles);
    Tape tape;
    Var out = model.forward(tape, seq, mask);
    const Tensor base = tape.value(out);

    TokenSequence poked = seq;
    poked.token(6)[2] = 123.0;  // query row 6 = third query's value channel
    Tape tape2;
    Var out2 = model.forward(tape2, poked, mask);
    const Tensor& changed = tape2.value(out2);
    for (int q = 0; q < 8; ++q) {
      if (q == 2) continue;
      CHECK(changed.at(q, 0) == base.at(q, 0));  // exact: queries never mix
    }
  }

  SUBCASE("a query predicts the same alone or alongside others") {
    RFormerModel model = RFormerModel::init(cfg, 9);
    TokenSequence joint = build_tokens(snap, split, st, cfg);
    AttentionMask joint_mask = build_mask(joint.roles);
    Tape tape;
    const Tensor joint_out = tape.value(model.forward(tape, joint, joint_mask));

    ObservationSplit solo = split;
    solo.query = {split.query[2]};
    TokenSequence seq = build_tokens(snap, solo, st, cfg);
    AttentionMask mask = build_mask(seq.roles);
    Tape tape2;
    const Tensor solo_out = tape2.value(model.forward(tape2, seq, mask));
    CHECK(solo_out.at(0, 0) == doctest::Approx(joint_out.at(2, 0)).epsilon(1e-6));
  }

  SUBCASE("single-layer model is invariant to observation order") {
    ModelConfig one = cfg;
    one.num_layers = 1;
    RFormerModel model = RFormerModel::init(one, 11);
    TokenSequence seq = build_tokens(snap, split, st, one);
    AttentionMask mask = build_mask(seq.roles);
    Tape tape;
    const Tensor base = tape.value(model.forward(tape, seq, mask));

    TokenSequence swapped = seq;  // swap obs tokens 0 and 3
    for (int c = 0; c < 3; ++c) std::swap(swapped.token(0)[c], swapped.token(3)[c]);
    std::swap(swapped.origin[0], swapped.origin[3]);
    Tape tape2;
    const Tensor perm = tape2.value(model.forward(tape2, swapped, mask));
    for (int64_t i = 0; i < base.numel(); ++i)
      CHECK(perm[i] == doctest::Approx(base[i]).epsilon(1e-5));
  }
}

TEST_CASE("parameter count at reference defaults") {
  ModelConfig cfg;  // defaults: 4 layers, 8 heads, 128 token size
  cfg.d_x = 2;
  cfg.d_v = 3;
  RFormerModel model = RFormerModel::init(cfg, 1);
  const int64_t count = model.param_count();
  MESSAGE("parameter count at defaults: ", count);
  CHECK(count >= 330000);
  CHECK(count <= 420000);
}

TEST_CASE("composed model gradients match finite differences") {
  ModelConfig cfg = small_config();  // L=2, d_token=16
  NormalizationStats st = identity_stats(2, 1);
  Snapshot snap = toy_snapshot(8, 5);
  ObservationSplit split = first_m_split(8, 4);
  TokenSequence seq = build_tokens(snap, split, st, cfg);
  AttentionMask mask = build_mask(seq.roles);
  Tensor truth({4, 1});
  for (int i = 0; i < 4; ++i)
    truth.at(i, 0) = static_cast<float>(snap.value(split.query[static_cast<size_t>(i)], 0));

  RFormerModel model32 = RFormerModel::init(cfg, 13);

  SUBCASE("float32 model against the float64 finite-difference oracle") {
    RFormerModelT<double> model64 = model32.cast<double>();
    const TensorT<double> truth64 = truth.cast<double>();
    // Analytic grads in float32.
    for (auto& p : model32.params) p.zero_grad();
    {
      Tape tape;
      Var loss = tape.relative_rmse(model32.forward(tape, seq, mask), truth);
      tape.backward(loss);
    }
    // Central differences on the promoted copy, step 1e-3.
    double max_rel = 0;
    auto loss64 = [&]() {
      TapeT<double> tape;
      Var loss = tape.relative_rmse(model64.forward(tape, seq, mask), truth64);
      return tape.value(loss)[0];
    };
    for (size_t pi = 0; pi < model64.params.size(); ++pi) {
      auto& value = model64.params[pi].value;
      for (int64_t e = 0; e < value.numel(); ++e) {
        const double saved = value[e];
        value[e] = saved + 1e-3;
        const double up = loss64();
        value[e] = saved - 1e-3;
        const double dn = loss64();
        value[e] = saved;
        const double fd = (up - dn) / 2e-3;
        const double a = static_cast<double>(model32.params[pi].grad[e]);
        const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
        max_rel = std::max(max_rel, rel);
      }
    }
    MESSAGE("max relative gradient error (f32 vs f64 oracle): ", max_rel);
    CHECK(max_rel < 1e-3);
  }

  SUBCASE("float64 model against its own finite differences") {
    RFormerModelT<double> model64 = model32.cast<double>();
    const TensorT<double> truth64 = truth.cast<double>();
    const double err = testing::max_rel_grad_error<double>(
        model64.params,
        [&](TapeT<double>& tape) {
          return tape.relative_rmse(model64.forward(tape, seq, mask), truth64);
        },
        1e-4, 1e-8);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("training") {
  // One memorizable snapshot; a small model should overfit quickly.
  Dataset ds;
  ds.d_x = 2;
  ds.d_v = 1;
  ds.component_names = {"u"};
  ds.snapshots = {toy_snapshot(64, 21)};
  NormalizationStats stats = compute_normalization(ds);
  std::vector<ObservationSplit> splits = {sample_observations(ds.snapshots[0], 16, 3)};

  ModelConfig mc = small_config();
  mc.d_token = 32;
  mc.ffn_hidden = 32;
  mc.head_hidden = 32;

  TrainConfig tc;
  tc.epochs = 1;
  tc.steps_per_epoch = 500;
  tc.batch_size = 4;
  tc.obs_per_sequence = 8;
  tc.query_per_sequence = 8;
  tc.learning_rate = 1e-3f;
  tc.seed = 5;

  SUBCASE("overfit smoke test drives the loss below 0.05") {
    RFormerModel model = RFormerModel::init(mc, 5);
    TrainResult r = train(model, ds, splits, stats, tc);
    REQUIRE(r.loss_history.size() == 500);
    double tail = 0;  // mean of the last 25 steps
    for (int i = 0; i < 25; ++i)
      tail += r.loss_history[r.loss_history.size() - 1 - static_cast<size_t>(i)];
    tail /= 25;
    MESSAGE("overfit tail loss: ", tail);
    CHECK(tail < 0.05);
  }

  SUBCASE("loss history length equals steps executed") {
    TrainConfig quick = tc;
    quick.steps_per_epoch = 7;
    quick.epochs = 3;
    RFormerModel model = RFormerModel::init(mc, 5);
    TrainResult r = train(model, ds, splits, stats, quick);
    CHECK(r.loss_history.size() == 21);
    CHECK(r.epochs_completed == 3);
  }

  SUBCASE("same seed reproduces parameters bit for bit") {
    TrainConfig quick = tc;
    quick.steps_per_epoch = 20;
    RFormerModel a = RFormerModel::init(mc, 5);
    RFormerModel b = RFormerModel::init(mc, 5);
    train(a, ds, splits, stats, quick);
    train(b, ds, splits, stats, quick);
    for (size_t p = 0; p < a.params.size(); ++p)
      CHECK(std::memcmp(a.params[p].value.data.data(), b.params[p].value.data.data(),
                        a.params[p].value.data.size() * sizeof(float)) == 0);
  }

  SUBCASE("resumed training continues the schedule exactly") {
    TrainConfig quick = tc;
    quick.steps_per_epoch = 10;
    quick.epochs = 4;
    RFormerModel straight = RFormerModel::init(mc, 5);
    AdamState opt_s;
    TrainResult rs = train(straight, ds, splits, stats, quick, &opt_s);

    RFormerModel resumed = RFormerModel::init(mc, 5);
    AdamState opt_r;
    TrainConfig first_half = quick;
    first_half.epochs = 2;
    TrainResult r1 = train(resumed, ds, splits, stats, first_half, &opt_r);
    TrainConfig second_half = quick;
    second_half.start_epoch = 2;
    TrainResult r2 =
        train(resumed, ds, splits, stats, second_half, &opt_r, &r1.loss_history);
    CHECK(r2.loss_history.size() == rs.loss_history.size());
    CHECK(r2.loss_history == rs.loss_history);
    for (size_t p = 0; p < straight.params.size(); ++p)
      CHECK(std::memcmp(straight.params[p].value.data.data(),
                        resumed.params[p].value.data.data(),
                        straight.params[p].value.data.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("chunked reconstruction") {
  ModelConfig cfg = small_config();
  cfg.max_seq_len = 40;
  NormalizationStats st = identity_stats(2, 1);
  Snapshot snap = toy_snapshot(30, 17);
  ObservationSplit split = first_m_split(30, 6);  // 24 queries
  RFormerModel model = RFormerModel::init(cfg, 19);

  SUBCASE("one chunk equals the unchunked pass") {
    const std::vector<double> full = reconstruct_chunked(model, snap, split, st, 24);
    TokenSequence seq = build_tokens(snap, split, st, cfg);
    AttentionMask mask = build_mask(seq.roles);
    Tape tape;
    const Tensor direct = tape.value(model.forward(tape, seq, mask));
    for (int q = 0; q < 24; ++q)
      CHECK(full[static_cast<size_t>(split.query[static_cast<size_t>(q)])] ==
            doctest::Approx(direct.at(q, 0)).epsilon(1e-6));
  }

  SUBCASE("n = 2*chunk + 3 pads the final chunk and covers all points") {
    ObservationSplit odd = first_m_split(30, 7);  // 23 queries
    const int chunk = 10;                         // 10 + 10 + (3 reals + 7 pads)
    REQUIRE(odd.num_query() == 2 * chunk + 3);
    const std::vector<double> full = reconstruct_chunked(model, snap, odd, st, chunk);
    CHECK(full.size() == 30);
    for (double v : full) CHECK(std::isfinite(v));
    // padded outputs were discarded: every query value matches a single pass
    const std::vector<double> ref =
        reconstruct_chunked(model, snap, odd, st, odd.num_query());
    for (int q : odd.query)
      CHECK(full[static_cast<size_t>(q)] ==
            doctest::Approx(ref[static_cast<size_t>(q)]).epsilon(1e-5));
  }

  SUBCASE("query order does not change per-point predictions") {
    TokenSequence forward_order = build_tokens(snap, split, st, cfg);
    std::vector<int> reversed(split.query.rbegin(), split.query.rend());
    TokenSequence reverse_order = build_tokens_from_indices(
        snap, st, split.observed, reversed, static_cast<int>(reversed.size()), cfg);
    AttentionMask mask = build_mask(forward_order.roles);
    Tape ta, tb;
    const Tensor a = ta.value(model.forward(ta, forward_order, mask));
    const Tensor b = tb.value(model.forward(tb, reverse_order, mask));
    const int n = split.num_query();
    for (int q = 0; q < n; ++q)
      CHECK(a.at(q, 0) == doctest::Approx(b.at(n - 1 - q, 0)).epsilon(1e-6));
  }

  SUBCASE("observed positions carry their observed values") {
    const std::vector<double> full = reconstruct_chunked(model, snap, split, st, 8);
    for (int o : split.observed)
      CHECK(full[static_cast<size_t>(o)] == snap.value(o, 0));
  }

  SUBCASE("too many observations for the sequence budget") {
    ModelConfig tiny = cfg;
    tiny.max_seq_len = 5;
    RFormerModel small = RFormerModel::init(tiny, 3);
    CHECK_THROWS_AS(reconstruct_chunked(small, snap, split, st, 8), DataError);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  ModelConfig cfg = small_config();
  RFormerModel model = RFormerModel::init(cfg, 29);
  NormalizationStats st = identity_stats(2, 1);
  st.value_mean = {0.25};
  st.value_std = {1.5};
  nlohmann::json meta{{"epoch", 3}, {"seed", 29}, {"loss_history", {0.5, 0.25}}};
  AdamState opt = AdamState::init(model.params);
  opt.step = 17;

  const std::string path =
      (fs::temp_directory_path() / ("recon_ckpt_" + std::to_string(::getpid()) + ".rck"))
          .string();
  make_checkpoint(model, st, meta, &opt).save(path);
  const Checkpoint back = Checkpoint::load(path);
  NormalizationStats st2;
  AdamState opt2;
  RFormerModel loaded = model_from_checkpoint(back, &st2, &opt2);
  CHECK(loaded.config.d_token == cfg.d_token);
  CHECK(st2.value_mean == st.value_mean);
  CHECK(opt2.step == 17);
  CHECK(back.metadata.at("epoch").get<int>() == 3);
  for (size_t p = 0; p < model.params.size(); ++p) {
    CHECK(loaded.params[p].name == model.params[p].name);
    CHECK(std::memcmp(loaded.params[p].value.data.data(),
                      model.params[p].value.data.data(),
                      model.params[p].value.data.size() * sizeof(float)) == 0);
  }
  // Loaded model predicts identically.
  Snapshot snap = toy_snapshot(10, 31);
  ObservationSplit split = first_m_split(10, 3);
  const std::vector<double> a = reconstruct_chunked(model, snap, split, st, 16);
  const std::vector<double> b = reconstruct_chunked(loaded, snap, split, st2, 16);
  CHECK(a == b);
  fs::remove(path);
}
