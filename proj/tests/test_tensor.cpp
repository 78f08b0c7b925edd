#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "grad_check.hpp"
#include "recon/tensor.hpp"

using namespace recon;

namespace {

// Standard-normal CDF by Simpson quadrature of the density; independent of
// the erf-based implementation under test.
double normal_cdf_quadrature(double x) {
  const double lo = -10.0;
  const int steps = 20000;  // even
  const double h = (x - lo) / steps;
  auto pdf = [](double t) {
    return std::exp(-0.5 * t * t) / std::sqrt(2.0 * 3.14159265358979323846);
  };
  double acc = pdf(lo) + pdf(x);
  for (int i = 1; i < steps; ++i) acc += pdf(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

Tensor make(std::vector<int> shape, std::vector<float> vals) {
  return Tensor::from(std::move(shape), std::move(vals));
}

}  // namespace

TEST_CASE("matmul examples") {
  Tape tape;
  SUBCASE("identity") {
    Var a = tape.constant(make({2, 2}, {1, 0, 0, 1}));
    Var b = tape.constant(make({2, 2}, {3.5f, -1, 2, 7}));
    Var c = tape.matmul(a, b);
    CHECK(tape.value(c).data == std::vector<float>{3.5f, -1, 2, 7});
  }
  SUBCASE("hand arithmetic") {
    Var a = tape.constant(make({2, 2}, {1, 2, 3, 4}));
    Var b = tape.constant(make({2, 2}, {5, 6, 7, 8}));
    Var c = tape.matmul(a, b);
    CHECK(tape.value(c).data == std::vector<float>{19, 22, 43, 50});
  }
  SUBCASE("zero annihilates") {
    Var a = tape.constant(Tensor({2, 2}));
    Var b = tape.constant(make({2, 3}, {1, 2, 3, 4, 5, 6}));
    Var c = tape.matmul(a, b);
    for (float v : tape.value(c).data) CHECK(v == 0.0f);
  }
  SUBCASE("shape mismatch throws") {
    Var a = tape.constant(Tensor({2, 3}));
    Var b = tape.constant(Tensor({2, 3}));
    CHECK_THROWS_AS(tape.matmul(a, b), DimensionError);
  }
}

TEST_CASE("gelu uses the exact normal CDF") {
  Tape tape;
  Var x = tape.constant(make({1, 4}, {0.0f, 1.0f, 6.0f, 8.0f}));
  Var y = tape.gelu(x);
  const Tensor& v = tape.value(y);
  CHECK(v[0] == 0.0f);
  CHECK(v[1] == doctest::Approx(0.8413447).epsilon(1e-6));
  CHECK(v[1] == doctest::Approx(1.0 * normal_cdf_quadrature(1.0)).epsilon(1e-6));
  CHECK(std::abs(v[2] - 6.0f) < 1e-6);  // Phi -> 1 asymptote
  CHECK(std::abs(v[3] - 8.0f) < 1e-6);
}

TEST_CASE("layer_norm examples") {
  SUBCASE("constant row maps to bias") {
    Tape tape;
    Var x = tape.constant(make({1, 4}, {3, 3, 3, 3}));
    Var g = tape.constant(make({4}, {1, 1, 1, 1}));
    Var b = tape.constant(make({4}, {0, 0, 0, 0}));
    Var y = tape.layer_norm(x, g, b, 1e-5f);
    for (float v : tape.value(y).data) CHECK(std::abs(v) < 1e-4);
  }
  SUBCASE("two-point row standardizes to +/-1 as eps -> 0") {
    TapeT<double> tape;
    Var x = tape.constant(TensorT<double>::from({1, 2}, {1.0, -1.0}));
    Var g = tape.constant(TensorT<double>::from({2}, {1.0, 1.0}));
    Var b = tape.constant(TensorT<double>::from({2}, {0.0, 0.0}));
    Var y = tape.layer_norm(x, g, b, 0.0);
    CHECK(tape.value(y)[0] == doctest::Approx(1.0));
    CHECK(tape.value(y)[1] == doctest::Approx(-1.0));
  }
  SUBCASE("zero gain broadcasts the bias") {
    Tape tape;
    Var x = tape.constant(make({2, 3}, {5, -2, 9, 0.5f, 4, 4}));
    Var g = tape.constant(make({3}, {0, 0, 0}));
    Var b = tape.constant(make({3}, {7, -3, 0.25f}));
    Var y = tape.layer_norm(x, g, b, 1e-5f);
    for (int i = 0; i < 2; ++i) {
      CHECK(tape.value(y).at(i, 0) == 7.0f);
      CHECK(tape.value(y).at(i, 1) == -3.0f);
      CHECK(tape.value(y).at(i, 2) == 0.25f);
    }
  }
}

TEST_CASE("layer_norm standardizes rows statistically") {
  Rng rng(7);
  Tape tape;
  const int s = 16, d = 32;
  Tensor x({s, d});
  for (int64_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(rng.normal() * 2.0 + 0.7);
  Var g = tape.constant(Tensor::full({d}, 1.0f));
  Var b = tape.constant(Tensor({d}));
  Var y = tape.layer_norm(tape.constant(x), g, b, 1e-5f);
  for (int i = 0; i < s; ++i) {
    double mean = 0, var = 0;
    for (int j = 0; j < d; ++j) mean += tape.value(y).at(i, j);
    mean /= d;
    for (int j = 0; j < d; ++j) {
      const double c = tape.value(y).at(i, j) - mean;
      var += c * c;
    }
    var /= d;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("masked softmax examples") {
  Tape tape;
  SUBCASE("single allowed entry takes all weight") {
    BoolMatrix mask(2, 2, false);
    mask.at(0, 1) = 1;
    mask.at(1, 0) = 1;
    mask.at(1, 1) = 1;
    Var s = tape.constant(make({1, 2, 2}, {5, -3, 0.5f, 0.5f}));
    Var p = tape.masked_softmax(s, mask);
    CHECK(tape.value(p)[0] == 0.0f);
    CHECK(tape.value(p)[1] == 1.0f);
  }
  SUBCASE("equal scores share weight 1/k") {
    BoolMatrix mask(3, 3, true);
    Var s = tape.constant(Tensor::full({1, 3, 3}, 0.42f));
    Var p = tape.masked_softmax(s, mask);
    for (float v : tape.value(p).data) CHECK(v == doctest::Approx(1.0f / 3).epsilon(1e-6));
  }
  SUBCASE("hand-computed two-entry softmax") {
    // oracle in double: e^1 / (e^1 + e^2), e^2 / (e^1 + e^2)
    const double e1 = std::exp(1.0), e2 = std::exp(2.0);
    BoolMatrix mask(2, 2, true);
    Var s = tape.constant(make({1, 2, 2}, {1, 2, 1, 2}));
    Var p = tape.masked_softmax(s, mask);
    CHECK(tape.value(p)[0] == doctest::Approx(e1 / (e1 + e2)).epsilon(1e-6));
    CHECK(tape.value(p)[1] == doctest::Approx(e2 / (e1 + e2)).epsilon(1e-6));
    CHECK(tape.value(p)[0] == doctest::Approx(0.2689).epsilon(1e-3));
    CHECK(tape.value(p)[1] == doctest::Approx(0.7311).epsilon(1e-3));
  }
  SUBCASE("fully masked row is rejected") {
    BoolMatrix mask(2, 2, false);
    mask.at(0, 0) = 1;
    Var s = tape.constant(Tensor({1, 2, 2}));
    CHECK_THROWS_AS(tape.masked_softmax(s, mask), NumericalError);
  }
}

TEST_CASE("masked softmax rows sum to one and masked entries are exact zeros") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int s = 2 + rng.uniform_int(7);
    const int h = 1 + rng.uniform_int(3);
    BoolMatrix mask(s, s, false);
    for (int i = 0; i < s; ++i) {
      mask.at(i, rng.uniform_int(s)) = 1;  // guarantee one allowed entry
      for (int j = 0; j < s; ++j)
        if (rng.uniform() < 0.4) mask.at(i, j) = 1;
    }
    Tensor scores({h, s, s});
    for (int64_t i = 0; i < scores.numel(); ++i)
      scores[i] = static_cast<float>(rng.normal() * 3);
    Tape tape;
    Var p = tape.masked_softmax(tape.constant(scores), mask);
    const Tensor& P = tape.value(p);
    for (int hh = 0; hh < h; ++hh)
      for (int i = 0; i < s; ++i) {
        double row = 0;
        for (int j = 0; j < s; ++j) {
          const float v = P[(static_cast<int64_t>(hh) * s + i) * s + j];
          if (!mask.at(i, j)) CHECK(v == 0.0f);
          row += v;
        }
        CHECK(std::abs(row - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("gaussian_nll examples") {
  const double half_log_2pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
  TapeT<double> tape;
  auto t2 = [](std::vector<double> v) {
    return TensorT<double>::from({1, 2}, std::move(v));
  };
  SUBCASE("zero residual, unit sigma") {
    Var mean = tape.constant(t2({1.5, -0.5}));
    Var sigma = tape.constant(t2({1.0, 1.0}));
    Var loss = tape.gaussian_nll(mean, sigma, t2({1.5, -0.5}));
    CHECK(tape.value(loss)[0] == doctest::Approx(half_log_2pi).epsilon(1e-12));
  }
  SUBCASE("sigma = e adds one") {
    const double e = std::exp(1.0);
    Var mean = tape.constant(t2({0.0, 0.0}));
    Var sigma = tape.constant(t2({e, e}));
    Var loss = tape.gaussian_nll(mean, sigma, t2({0.0, 0.0}));
    CHECK(tape.value(loss)[0] == doctest::Approx(1.0 + half_log_2pi).epsilon(1e-12));
  }
  SUBCASE("unit residual, unit sigma") {
    Var mean = tape.constant(t2({0.0, 0.0}));
    Var sigma = tape.constant(t2({1.0, 1.0}));
    Var loss = tape.gaussian_nll(mean, sigma, t2({1.0, 1.0}));
    CHECK(tape.value(loss)[0] == doctest::Approx(0.5 + half_log_2pi).epsilon(1e-12));
  }
  SUBCASE("nonpositive sigma is rejected") {
    Var mean = tape.constant(t2({0.0, 0.0}));
    Var sigma = tape.constant(t2({1.0, 0.0}));
    CHECK_THROWS_AS(tape.gaussian_nll(mean, sigma, t2({0.0, 0.0})), NumericalError);
  }
}

TEST_CASE("backward on linear and quadratic maps") {
  SUBCASE("sum(W x) gradient has outer-product structure") {
    ParameterT<float> w("w", make({2, 3}, {1, 2, 3, 4, 5, 6}));
    Tape tape;
    Var x = tape.constant(make({3, 2}, {1, -1, 2, 0.5f, -3, 2}));
    Var loss = tape.sum(tape.matmul(tape.leaf(w), x));
    tape.backward(loss);
    // d/dW sum(W x) = ones(2,2) x^T -> row r, col c: sum_j x[c][j]
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) {
        float expect = 0;
        for (int j = 0; j < 2; ++j) expect += tape.value(x).at(c, j);
        CHECK(w.grad.at(r, c) == doctest::Approx(expect));
      }
  }
  SUBCASE("grad of squared norm is 2W") {
    ParameterT<float> w("w", make({2, 2}, {1, -2, 0.5f, 3}));
    Tape tape;
    Var wl = tape.leaf(w);
    Var loss = tape.sum(tape.mul(wl, wl));
    tape.backward(loss);
    for (int64_t i = 0; i < w.value.numel(); ++i)
      CHECK(w.grad[i] == doctest::Approx(2 * w.value[i]));
  }
  SUBCASE("unused parameters receive exactly zero") {
    ParameterT<float> used("used", make({1, 2}, {1, 2}));
    ParameterT<float> unused("unused", make({1, 2}, {3, 4}));
    Tape tape;
    Var a = tape.leaf(used);
    tape.leaf(unused);
    Var loss = tape.sum(a);
    tape.backward(loss);
    CHECK(unused.grad[0] == 0.0f);
    CHECK(unused.grad[1] == 0.0f);
    CHECK(used.grad[0] == 1.0f);
  }
  SUBCASE("backward twice is a state error") {
    ParameterT<float> w("w", make({1, 1}, {2}));
    Tape tape;
    Var loss = tape.sum(tape.leaf(w));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), StateError);
  }
}

TEST_CASE("finite-difference check for every primitive") {
  // Randomized small shapes, double precision, tolerance 1e-6.
  Rng shape_rng(23);
  const double step = 1e-5, tol = 1e-6, floor = 1e-10;
  using testing::max_rel_grad_error;

  auto rand_param = [&](std::string name, std::vector<int> shape, double scale = 1.0) {
    TensorT<double> t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = shape_rng.normal() * scale;
    return ParameterT<double>(std::move(name), std::move(t));
  };

  SUBCASE("matmul + add + bias + slice + concat + repeat + mean") {
    const int p = 2 + shape_rng.uniform_int(3);
    const int q = 2 + shape_rng.uniform_int(3);
    const int r = 2 + shape_rng.uniform_int(3);
    std::vector<ParameterT<double>> params;
    params.push_back(rand_param("a", {p, q}));
    params.push_back(rand_param("b", {q, r}));
    params.push_back(rand_param("bias", {r}));
    params.push_back(rand_param("c", {p, r}));
    const double err = max_rel_grad_error<double>(
        params,
        [&](TapeT<double>& tape) {
          Var a = tape.leaf(params[0]);
          Var b = tape.leaf(params[1]);
          Var m = tape.add_row_bias(tape.matmul(a, b), tape.leaf(params[2]));
          Var s = tape.add(m, tape.leaf(params[3]));
          Var cat = tape.concat_cols(s, tape.slice_cols(s, 0, 1));
          Var sl = tape.slice_rows(cat, 0, p > 1 ? p - 1 : p);
          Var mr = tape.repeat_rows(tape.mean_rows(sl), 3);
          return tape.sum(tape.mul(mr, mr));
        },
        step, floor);
    CHECK(err < tol);
  }

  SUBCASE("gelu + softplus + affine + layer_norm") {
    std::vector<ParameterT<double>> params;
    params.push_back(rand_param("x", {3, 5}));
    params.push_back(rand_param("g", {5}, 0.5));
    params.push_back(rand_param("b", {5}, 0.5));
    const double err = max_rel_grad_error<double>(
        params,
        [&](TapeT<double>& tape) {
          Var x = tape.leaf(params[0]);
          Var y = tape.layer_norm(tape.gelu(x), tape.leaf(params[1]),
                                  tape.leaf(params[2]), 1e-5);
          Var z = tape.affine(tape.softplus(y), 0.9, 0.1);
          return tape.sum(tape.mul(z, z));
        },
        step, floor);
    CHECK(err < tol);
  }

  SUBCASE("attention pipeline") {
    const int s = 4, d = 6, heads = 2;
    BoolMatrix mask(s, s, false);
    Rng mrng(99);
    for (int i = 0; i < s; ++i) {
      mask.at(i, mrng.uniform_int(s)) = 1;
      for (int j = 0; j < s; ++j)
        if (mrng.uniform() < 0.5) mask.at(i, j) = 1;
    }
    std::vector<ParameterT<double>> params;
    params.push_back(rand_param("q", {s, d}));
    params.push_back(rand_param("k", {s, d}));
    params.push_back(rand_param("v", {s, d}));
    const double err = max_rel_grad_error<double>(
        params,
        [&](TapeT<double>& tape) {
          Var q = tape.split_heads(tape.leaf(params[0]), heads);
          Var k = tape.split_heads(tape.leaf(params[1]), heads);
          Var v = tape.split_heads(tape.leaf(params[2]), heads);
          Var probs = tape.masked_softmax(tape.attention_scores(q, k, 1.0 / std::sqrt(3.0)),
                                          mask);
          Var mixed = tape.merge_heads(tape.attention_mix(probs, v));
          return tape.sum(tape.mul(mixed, mixed));
        },
        step, floor);
    CHECK(err < tol);
  }

  SUBCASE("relative_rmse and gaussian_nll losses") {
    std::vector<ParameterT<double>> params;
    params.push_back(rand_param("pred", {4, 3}));
    params.push_back(rand_param("sig_raw", {4, 3}));
    TensorT<double> truth({4, 3});
    for (int64_t i = 0; i < truth.numel(); ++i) truth[i] = shape_rng.normal();
    const double err1 = max_rel_grad_error<double>(
        params,
        [&](TapeT<double>& tape) {
          return tape.relative_rmse(tape.leaf(params[0]), truth);
        },
        step, floor);
    CHECK(err1 < tol);
    const double err2 = max_rel_grad_error<double>(
        params,
        [&](TapeT<double>& tape) {
          Var sigma = tape.affine(tape.softplus(tape.leaf(params[1])), 0.9, 0.1);
          return tape.gaussian_nll(tape.leaf(params[0]), sigma, truth);
        },
        step, floor);
    CHECK(err2 < tol);
  }
}

TEST_CASE("relative_rmse loss examples") {
  Tape tape;
  SUBCASE("exact prediction gives zero") {
    Tensor truth = make({2, 1}, {3, -4});
    Var pred = tape.constant(truth);
    CHECK(tape.value(tape.relative_rmse(pred, truth))[0] == 0.0f);
  }
  SUBCASE("zero prediction gives one") {
    Tensor truth = make({2, 1}, {3, -4});
    Var pred = tape.constant(Tensor({2, 1}));
    CHECK(tape.value(tape.relative_rmse(pred, truth))[0] == doctest::Approx(1.0f));
  }
  SUBCASE("hand arithmetic 1/sqrt(2)") {
    Tensor truth = make({2, 1}, {1, 1});
    Var pred = tape.constant(make({2, 1}, {1, 0}));
    CHECK(tape.value(tape.relative_rmse(pred, truth))[0] ==
          doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-6));
  }
  SUBCASE("zero-norm truth is an error") {
    Var pred = tape.constant(make({2, 1}, {1, 0}));
    CHECK_THROWS_AS(tape.relative_rmse(pred, Tensor({2, 1})), NumericalError);
  }
}

TEST_CASE("adam examples") {
  SUBCASE("first bias-corrected step moves by -lr") {
    std::vector<Parameter> params;
    params.emplace_back("w", Tensor::full({3}, 1.0f));
    for (int64_t i = 0; i < 3; ++i) params[0].grad[i] = 1.0f;
    AdamState st = AdamState::init(params);
    AdamConfig cfg;  // lr 0.001, betas (0.9, 0.999), eps 1e-8
    adam_step(params, st, cfg);
    for (int64_t i = 0; i < 3; ++i)
      CHECK(params[0].value[i] == doctest::Approx(1.0f - 0.001f).epsilon(1e-6));
    CHECK(st.step == 1);
  }
  SUBCASE("zero gradient leaves parameters unchanged but advances the counter") {
    std::vector<Parameter> params;
    params.emplace_back("w", Tensor::full({2}, 0.5f));
    AdamState st = AdamState::init(params);
    AdamConfig cfg;
    adam_step(params, st, cfg);
    CHECK(params[0].value[0] == 0.5f);
    CHECK(params[0].value[1] == 0.5f);
    CHECK(st.step == 1);
  }
  SUBCASE("constant gradient moves monotonically against its sign") {
    std::vector<Parameter> params;
    params.emplace_back("w", Tensor::full({1}, 2.0f));
    AdamState st = AdamState::init(params);
    AdamConfig cfg;
    float prev = params[0].value[0];
    for (int i = 0; i < 2; ++i) {
      params[0].grad[0] = 0.7f;
      adam_step(params, st, cfg);
      CHECK(params[0].value[0] < prev);
      prev = params[0].value[0];
    }
  }
  SUBCASE("gradients are zeroed after the step") {
    std::vector<Parameter> params;
    params.emplace_back("w", Tensor::full({2}, 1.0f));
    params[0].grad[0] = 3.0f;
    AdamState st = AdamState::init(params);
    AdamConfig cfg;
    adam_step(params, st, cfg);
    CHECK(params[0].grad[0] == 0.0f);
  }
}

TEST_CASE("fixed seed and fixed thread budget give bit-identical results") {
  auto run = [](int threads) {
    const int saved = thread_budget();
    thread_budget() = threads;
    Rng rng(1234);
    Tensor a({64, 48}), b({48, 80});
    for (int64_t i = 0; i < a.numel(); ++i) a[i] = static_cast<float>(rng.normal());
    for (int64_t i = 0; i < b.numel(); ++i) b[i] = static_cast<float>(rng.normal());
    Tape tape;
    Var c = tape.matmul(tape.constant(a), tape.constant(b));
    std::vector<float> out = tape.value(c).data;
    thread_budget() = saved;
    return out;
  };
  const auto base = run(1);
  CHECK(std::memcmp(base.data(), run(1).data(), base.size() * sizeof(float)) == 0);
  // Row-partitioned kernels keep results identical across thread counts too.
  CHECK(std::memcmp(base.data(), run(4).data(), base.size() * sizeof(float)) == 0);
}

TEST_CASE("non-finite outputs are detected when checks are enabled") {
  const bool saved = finite_checks();
  finite_checks() = true;
  Tape tape;
  Var x = tape.constant(make({1, 2}, {1e30f, 1e30f}));
  CHECK_THROWS_AS(tape.mul(x, x), NumericalError);
  finite_checks() = saved;
}
