#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation and the
// Adam optimizer. The set of primitives is exactly what the reconstruction
// models need; there is no broadcasting machinery beyond row-bias addition.
//
// Everything is templated on the scalar type: models train in float, and the
// same graph code can be instantiated in double for finite-difference
// gradient oracles and conditioning-sensitive checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "recon/errors.hpp"
#include "recon/rng.hpp"

namespace recon {

// ---------------------------------------------------------------------------
// Runtime switches

// Non-finite outputs raise NumericalError when enabled. On by default; the
// scan is cheap next to the arithmetic it guards.
bool& finite_checks();

// Upper bound on intra-op threads. Parallel kernels partition output rows,
// so results are bit-identical for any thread count; strict-deterministic
// mode forces 1 anyway. Initialized from RECON_THREADS, default 1.
int& thread_budget();

namespace detail {

// Runs fn(begin, end) over [0, n) split across at most thread_budget()
// threads. Each index is processed by exactly one thread with unchanged
// iteration order, so floating-point results do not depend on the split.
inline void parallel_rows(int n, const std::function<void(int, int)>& fn) {
  int threads = std::min(thread_budget(), n);
  if (threads <= 1 || n < 64) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  const int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const int lo = t * chunk;
    const int hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor

template <class T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;  // row-major

  TensorT() = default;
  TensorT(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int e : s) {
      if (e <= 0) throw DimensionError("tensor extent must be positive");
      n *= e;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2-D accessors (rows x cols).
  T& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  const T& at(int r, int c) const {
    return data[static_cast<size_t>(r) * shape[1] + c];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) os << "x";
      os << shape[i];
    }
    os << "]";
    return os.str();
  }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }

  static TensorT full(std::vector<int> s, T v) { return TensorT(std::move(s), v); }

  static TensorT from(std::vector<int> s, std::vector<T> values) {
    TensorT t;
    t.shape = std::move(s);
    if (numel_of(t.shape) != static_cast<int64_t>(values.size()))
      throw DimensionError("tensor data length does not match shape");
    t.data = std::move(values);
    return t;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

// Boolean attend-permission matrix; row = attending position, col = attended.
struct BoolMatrix {
  int rows = 0, cols = 0;
  std::vector<uint8_t> allowed;

  BoolMatrix() = default;
  BoolMatrix(int r, int c, bool fill = false)
      : rows(r), cols(c), allowed(static_cast<size_t>(r) * c, fill ? 1 : 0) {}

  uint8_t& at(int r, int c) { return allowed[static_cast<size_t>(r) * cols + c]; }
  uint8_t at(int r, int c) const { return allowed[static_cast<size_t>(r) * cols + c]; }
};

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct ParameterT {
  std::string name;
  TensorT<T> value;
  TensorT<T> grad;  // same shape as value, accumulated by backward passes

  ParameterT() = default;
  ParameterT(std::string n, TensorT<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

using Parameter = ParameterT<float>;

// ---------------------------------------------------------------------------
// Tape

struct Var {
  int node = -1;
  bool valid() const { return node >= 0; }
};

// Ordered record of executed primitives. Forward evaluation appends nodes;
// backward() walks the record in reverse, which is a valid reverse
// topological order because nodes were appended in execution order.
template <class T>
class TapeT {
 public:
  using Tensor = TensorT<T>;

  struct Node {
    Tensor value;
    Tensor grad;  // sized lazily during backward()
    std::function<void(TapeT&, const Node&)> backprop;  // null for leaves
    ParameterT<T>* param = nullptr;
  };

  // -- graph construction ---------------------------------------------------

  Var constant(Tensor v) { return push(std::move(v), nullptr, nullptr); }

  Var leaf(ParameterT<T>& p) {
    if (p.grad.shape != p.value.shape)
      throw DimensionError("parameter '" + p.name + "': gradient shape mismatch");
    return push(p.value, nullptr, &p);
  }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  Tensor& grad(Var v) { return nodes_[check(v)].grad; }

  // -- primitives -----------------------------------------------------------

  // Standard matrix product [p x q] * [q x r] -> [p x r].
  Var matmul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.rank() == 2 && B.rank() == 2, "matmul: expects 2-D operands");
    if (A.dim(1) != B.dim(0))
      throw DimensionError("matmul: inner extents disagree, " + A.shape_str() +
                           " vs " + B.shape_str());
    const int p = A.dim(0), q = A.dim(1), r = B.dim(1);
    Tensor C({p, r});
    detail::parallel_rows(p, [&](int lo, int hi) {
      for (int i = lo; i < hi; ++i) {
        T* crow = &C.data[static_cast<size_t>(i) * r];
        for (int k = 0; k < q; ++k) {
          const T aik = A.data[static_cast<size_t>(i) * q + k];
          const T* brow = &B.data[static_cast<size_t>(k) * r];
          for (int j = 0; j < r; ++j) crow[j] += aik * brow[j];
        }
      }
    });
    return push(std::move(C), [a, b, p, q, r](TapeT& t, const Node& n) {
      Tensor& dA = t.grad(a);
      Tensor& dB = t.grad(b);
      const Tensor& A2 = t.value(a);
      const Tensor& B2 = t.value(b);
      const Tensor& dC = n.grad;
      // dA += dC * B^T
      detail::parallel_rows(p, [&](int lo, int hi) {
        for (int i = lo; i < hi; ++i) {
          for (int k = 0; k < q; ++k) {
            T acc = 0;
            const T* dcrow = &dC.data[static_cast<size_t>(i) * r];
            const T* brow = &B2.data[static_cast<size_t>(k) * r];
            for (int j = 0; j < r; ++j) acc += dcrow[j] * brow[j];
            dA.data[static_cast<size_t>(i) * q + k] += acc;
          }
        }
      });
      // dB += A^T * dC
      detail::parallel_rows(q, [&](int lo, int hi) {
        for (int k = lo; k < hi; ++k) {
          T* dbrow = &dB.data[static_cast<size_t>(k) * r];
          for (int i = 0; i < p; ++i) {
            const T aik = A2.data[static_cast<size_t>(i) * q + k];
            const T* dcrow = &dC.data[static_cast<size_t>(i) * r];
            for (int j = 0; j < r; ++j) dbrow[j] += aik * dcrow[j];
          }
        }
      });
    });
  }

  Var add(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
      throw DimensionError("add: shape mismatch " + A.shape_str() + " vs " +
                           B.shape_str());
    Tensor C = A;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] += B[i];
    return push(std::move(C), [a, b](TapeT& t, const Node& n) {
      Tensor& dA = t.grad(a);
      Tensor& dB = t.grad(b);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        dA[i] += n.grad[i];
        dB[i] += n.grad[i];
      }
    });
  }

  Var sub(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
      throw DimensionError("sub: shape mismatch " + A.shape_str() + " vs " +
                           B.shape_str());
    Tensor C = A;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] -= B[i];
    return push(std::move(C), [a, b](TapeT& t, const Node& n) {
      Tensor& dA = t.grad(a);
      Tensor& dB = t.grad(b);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        dA[i] += n.grad[i];
        dB[i] -= n.grad[i];
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (!A.same_shape(B))
      throw DimensionError("mul: shape mismatch " + A.shape_str() + " vs " +
                           B.shape_str());
    Tensor C = A;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] *= B[i];
    return push(std::move(C), [a, b](TapeT& t, const Node& n) {
      Tensor& dA = t.grad(a);
      Tensor& dB = t.grad(b);
      const Tensor& A2 = t.value(a);
      const Tensor& B2 = t.value(b);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        dA[i] += n.grad[i] * B2[i];
        dB[i] += n.grad[i] * A2[i];
      }
    });
  }

  // y = scale * x + shift, elementwise with scalar constants.
  Var affine(Var x, T scale, T shift) {
    Tensor C = value(x);
    for (int64_t i = 0; i < C.numel(); ++i) C[i] = scale * C[i] + shift;
    return push(std::move(C), [x, scale](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      for (int64_t i = 0; i < n.grad.numel(); ++i) dX[i] += scale * n.grad[i];
    });
  }

  // Adds a [d] bias vector to every row of a [s x d] matrix.
  Var add_row_bias(Var x, Var bias) {
    const Tensor& X = value(x);
    const Tensor& B = value(bias);
    require(X.rank() == 2 && B.rank() == 1 && B.dim(0) == X.dim(1),
            "add_row_bias: bias must match row width");
    const int s = X.dim(0), d = X.dim(1);
    Tensor C = X;
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < d; ++j) C.at(i, j) += B[j];
    return push(std::move(C), [x, bias, s, d](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      Tensor& dB = t.grad(bias);
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < d; ++j) {
          dX.at(i, j) += n.grad.at(i, j);
          dB[j] += n.grad.at(i, j);
        }
    });
  }

  // Exact-CDF GELU: x * Phi(x) with Phi the standard normal CDF.
  Var gelu(Var x) {
    const Tensor& X = value(x);
    Tensor C = X;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] = X[i] * normal_cdf(X[i]);
    return push(std::move(C), [x](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      const Tensor& X2 = t.value(x);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        const T v = X2[i];
        dX[i] += n.grad[i] * (normal_cdf(v) + v * normal_pdf(v));
      }
    });
  }

  Var softplus(Var x) {
    const Tensor& X = value(x);
    Tensor C = X;
    for (int64_t i = 0; i < C.numel(); ++i) C[i] = softplus_scalar(X[i]);
    return push(std::move(C), [x](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      const Tensor& X2 = t.value(x);
      for (int64_t i = 0; i < n.grad.numel(); ++i) {
        dX[i] += n.grad[i] * sigmoid_scalar(X2[i]);
      }
    });
  }

  // Per-row standardization over the last axis, then affine gain/bias.
  Var layer_norm(Var x, Var gain, Var bias, T eps) {
    const Tensor& X = value(x);
    const Tensor& G = value(gain);
    const Tensor& B = value(bias);
    require(X.rank() == 2, "layer_norm: expects [s x d]");
    const int s = X.dim(0), d = X.dim(1);
    require(d >= 2, "layer_norm: needs d >= 2");
    require(G.rank() == 1 && G.dim(0) == d && B.rank() == 1 && B.dim(0) == d,
            "layer_norm: gain/bias must be [d]");
    Tensor C({s, d});
    Tensor norm({s, d});  // pre-affine standardized values, reused in backward
    std::vector<T> inv_std(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) {
      T mean = 0;
      for (int j = 0; j < d; ++j) mean += X.at(i, j);
      mean /= static_cast<T>(d);
      T var = 0;
      for (int j = 0; j < d; ++j) {
        const T c = X.at(i, j) - mean;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(i)] = is;
      for (int j = 0; j < d; ++j) {
        const T y = (X.at(i, j) - mean) * is;
        norm.at(i, j) = y;
        C.at(i, j) = G[j] * y + B[j];
      }
    }
    return push(std::move(C), [x, gain, bias, s, d, norm = std::move(norm),
                               inv_std = std::move(inv_std)](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      Tensor& dG = t.grad(gain);
      Tensor& dB = t.grad(bias);
      const Tensor& G2 = t.value(gain);
      for (int i = 0; i < s; ++i) {
        T sum_gy = 0, sum_gyy = 0;
        for (int j = 0; j < d; ++j) {
          const T go = n.grad.at(i, j);
          const T y = norm.at(i, j);
          dG[j] += go * y;
          dB[j] += go;
          const T gy = go * G2[j];
          sum_gy += gy;
          sum_gyy += gy * y;
        }
        const T inv_d = T(1) / static_cast<T>(d);
        const T is = inv_std[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) {
          const T gy = n.grad.at(i, j) * G2[j];
          const T y = norm.at(i, j);
          dX.at(i, j) += is * (gy - inv_d * sum_gy - y * inv_d * sum_gyy);
        }
      }
    });
  }

  // [s x d] -> [h x s x dh] with dh = d / h.
  Var split_heads(Var x, int heads) {
    const Tensor& X = value(x);
    require(X.rank() == 2, "split_heads: expects [s x d]");
    const int s = X.dim(0), d = X.dim(1);
    if (heads <= 0 || d % heads != 0)
      throw DimensionError("split_heads: width not divisible by head count");
    const int dh = d / heads;
    Tensor C({heads, s, dh});
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < dh; ++j)
          C[(static_cast<int64_t>(h) * s + i) * dh + j] = X.at(i, h * dh + j);
    return push(std::move(C), [x, heads, s, dh](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < dh; ++j)
            dX.at(i, h * dh + j) += n.grad[(static_cast<int64_t>(h) * s + i) * dh + j];
    });
  }

  // [h x s x dh] -> [s x d].
  Var merge_heads(Var x) {
    const Tensor& X = value(x);
    require(X.rank() == 3, "merge_heads: expects [h x s x dh]");
    const int heads = X.dim(0), s = X.dim(1), dh = X.dim(2);
    Tensor C({s, heads * dh});
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < dh; ++j)
          C.at(i, h * dh + j) = X[(static_cast<int64_t>(h) * s + i) * dh + j];
    return push(std::move(C), [x, heads, s, dh](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < dh; ++j)
            dX[(static_cast<int64_t>(h) * s + i) * dh + j] += n.grad.at(i, h * dh + j);
    });
  }

  // scores[h,i,j] = scale * <q[h,i,:], k[h,j,:]>.
  Var attention_scores(Var q, Var k, T scale) {
    const Tensor& Q = value(q);
    const Tensor& K = value(k);
    require(Q.rank() == 3 && K.rank() == 3 && Q.shape == K.shape,
            "attention_scores: expects matching [h x s x dh]");
    const int heads = Q.dim(0), s = Q.dim(1), dh = Q.dim(2);
    Tensor C({heads, s, s});
    detail::parallel_rows(heads * s, [&](int lo, int hi) {
      for (int hs = lo; hs < hi; ++hs) {
        const int h = hs / s, i = hs % s;
        const T* qrow = &Q.data[(static_cast<size_t>(h) * s + i) * dh];
        for (int j = 0; j < s; ++j) {
          const T* krow = &K.data[(static_cast<size_t>(h) * s + j) * dh];
          T acc = 0;
          for (int e = 0; e < dh; ++e) acc += qrow[e] * krow[e];
          C.data[(static_cast<size_t>(h) * s + i) * s + j] = scale * acc;
        }
      }
    });
    return push(std::move(C), [q, k, heads, s, dh, scale](TapeT& t, const Node& n) {
      Tensor& dQ = t.grad(q);
      Tensor& dK = t.grad(k);
      const Tensor& Q2 = t.value(q);
      const Tensor& K2 = t.value(k);
      for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < s; ++i) {
          const T* ds = &n.grad.data[(static_cast<size_t>(h) * s + i) * s];
          T* dqrow = &dQ.data[(static_cast<size_t>(h) * s + i) * dh];
          const T* qrow = &Q2.data[(static_cast<size_t>(h) * s + i) * dh];
          for (int j = 0; j < s; ++j) {
            const T g = scale * ds[j];
            if (g == T(0)) continue;
            const T* krow = &K2.data[(static_cast<size_t>(h) * s + j) * dh];
            T* dkrow = &dK.data[(static_cast<size_t>(h) * s + j) * dh];
            for (int e = 0; e < dh; ++e) {
              dqrow[e] += g * krow[e];
              dkrow[e] += g * qrow[e];
            }
          }
        }
      }
    });
  }

  // Softmax over allowed entries per row; disallowed entries are exactly 0.
  // scores: [h x s x s], mask: [s x s].
  Var masked_softmax(Var scores, const BoolMatrix& mask) {
    const Tensor& S = value(scores);
    require(S.rank() == 3 && S.dim(1) == S.dim(2), "masked_softmax: expects [h x s x s]");
    const int heads = S.dim(0), s = S.dim(1);
    if (mask.rows != s || mask.cols != s)
      throw DimensionError("masked_softmax: mask size does not match scores");
    for (int i = 0; i < s; ++i) {
      bool any = false;
      for (int j = 0; j < s; ++j) any = any || mask.at(i, j);
      if (!any)
        throw NumericalError("masked_softmax: fully masked row " + std::to_string(i));
    }
    Tensor P({heads, s, s});
    detail::parallel_rows(heads * s, [&](int lo, int hi) {
      for (int hs = lo; hs < hi; ++hs) {
        const int h = hs / s, i = hs % s;
        const T* srow = &S.data[(static_cast<size_t>(h) * s + i) * s];
        T* prow = &P.data[(static_cast<size_t>(h) * s + i) * s];
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < s; ++j)
          if (mask.at(i, j) && srow[j] > mx) mx = srow[j];
        T denom = 0;
        for (int j = 0; j < s; ++j) {
          if (mask.at(i, j)) {
            const T e = std::exp(srow[j] - mx);
            prow[j] = e;
            denom += e;
          } else {
            prow[j] = T(0);
          }
        }
        const T inv = T(1) / denom;
        for (int j = 0; j < s; ++j) prow[j] *= inv;
      }
    });
    return push(std::move(P), [scores, heads, s](TapeT& t, const Node& n) {
      Tensor& dS = t.grad(scores);
      const Tensor& P2 = n.value;
      for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < s; ++i) {
          const size_t base = (static_cast<size_t>(h) * s + i) * s;
          T dot = 0;
          for (int j = 0; j < s; ++j) dot += n.grad.data[base + j] * P2.data[base + j];
          for (int j = 0; j < s; ++j)
            dS.data[base + j] += P2.data[base + j] * (n.grad.data[base + j] - dot);
        }
      }
    });
  }

  // out[h,i,:] = sum_j probs[h,i,j] * v[h,j,:].
  Var attention_mix(Var probs, Var v) {
    const Tensor& P = value(probs);
    const Tensor& V = value(v);
    require(P.rank() == 3 && V.rank() == 3 && P.dim(0) == V.dim(0) &&
                P.dim(1) == P.dim(2) && P.dim(2) == V.dim(1),
            "attention_mix: shape mismatch");
    const int heads = P.dim(0), s = P.dim(1), dh = V.dim(2);
    Tensor C({heads, s, dh});
    detail::parallel_rows(heads * s, [&](int lo, int hi) {
      for (int hs = lo; hs < hi; ++hs) {
        const int h = hs / s, i = hs % s;
        const T* prow = &P.data[(static_cast<size_t>(h) * s + i) * s];
        T* crow = &C.data[(static_cast<size_t>(h) * s + i) * dh];
        for (int j = 0; j < s; ++j) {
          const T p = prow[j];
          if (p == T(0)) continue;
          const T* vrow = &V.data[(static_cast<size_t>(h) * s + j) * dh];
          for (int e = 0; e < dh; ++e) crow[e] += p * vrow[e];
        }
      }
    });
    return push(std::move(C), [probs, v, heads, s, dh](TapeT& t, const Node& n) {
      Tensor& dP = t.grad(probs);
      Tensor& dV = t.grad(v);
      const Tensor& P2 = t.value(probs);
      const Tensor& V2 = t.value(v);
      for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < s; ++i) {
          const T* dc = &n.grad.data[(static_cast<size_t>(h) * s + i) * dh];
          const T* prow = &P2.data[(static_cast<size_t>(h) * s + i) * s];
          T* dprow = &dP.data[(static_cast<size_t>(h) * s + i) * s];
          for (int j = 0; j < s; ++j) {
            const T* vrow = &V2.data[(static_cast<size_t>(h) * s + j) * dh];
            T* dvrow = &dV.data[(static_cast<size_t>(h) * s + j) * dh];
            T acc = 0;
            const T p = prow[j];
            for (int e = 0; e < dh; ++e) {
              acc += dc[e] * vrow[e];
              if (p != T(0)) dvrow[e] += p * dc[e];
            }
            dprow[j] += acc;
          }
        }
      }
    });
  }

  // Rows [row0, row1) of a [s x d] matrix.
  Var slice_rows(Var x, int row0, int row1) {
    const Tensor& X = value(x);
    require(X.rank() == 2, "slice_rows: expects [s x d]");
    const int s = X.dim(0), d = X.dim(1);
    if (row0 < 0 || row1 > s || row0 >= row1)
      throw DimensionError("slice_rows: bad range");
    Tensor C({row1 - row0, d});
    std::copy(X.data.begin() + static_cast<size_t>(row0) * d,
              X.data.begin() + static_cast<size_t>(row1) * d, C.data.begin());
    return push(std::move(C), [x, row0, d](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      const int rows = n.grad.dim(0);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) dX.at(row0 + i, j) += n.grad.at(i, j);
    });
  }

  // Columns [col0, col1) of a [s x d] matrix.
  Var slice_cols(Var x, int col0, int col1) {
    const Tensor& X = value(x);
    require(X.rank() == 2, "slice_cols: expects [s x d]");
    const int s = X.dim(0), d = X.dim(1);
    if (col0 < 0 || col1 > d || col0 >= col1)
      throw DimensionError("slice_cols: bad range");
    const int w = col1 - col0;
    Tensor C({s, w});
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < w; ++j) C.at(i, j) = X.at(i, col0 + j);
    return push(std::move(C), [x, col0, w](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      const int rows = n.grad.dim(0);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < w; ++j) dX.at(i, col0 + j) += n.grad.at(i, j);
    });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    require(A.rank() == 2 && B.rank() == 2 && A.dim(0) == B.dim(0),
            "concat_cols: row counts must match");
    const int s = A.dim(0), da = A.dim(1), db = B.dim(1);
    Tensor C({s, da + db});
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < da; ++j) C.at(i, j) = A.at(i, j);
      for (int j = 0; j < db; ++j) C.at(i, da + j) = B.at(i, j);
    }
    return push(std::move(C), [a, b, s, da, db](TapeT& t, const Node& n) {
      Tensor& dA = t.grad(a);
      Tensor& dB = t.grad(b);
      for (int i = 0; i < s; ++i) {
        for (int j = 0; j < da; ++j) dA.at(i, j) += n.grad.at(i, j);
        for (int j = 0; j < db; ++j) dB.at(i, j) += n.grad.at(i, da + j);
      }
    });
  }

  // Column means of [s x d] -> [1 x d].
  Var mean_rows(Var x) {
    const Tensor& X = value(x);
    require(X.rank() == 2, "mean_rows: expects [s x d]");
    const int s = X.dim(0), d = X.dim(1);
    Tensor C({1, d});
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < d; ++j) C.at(0, j) += X.at(i, j);
    for (int j = 0; j < d; ++j) C.at(0, j) /= static_cast<T>(s);
    return push(std::move(C), [x, s, d](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      const T inv = T(1) / static_cast<T>(s);
      for (int i = 0; i < s; ++i)
        for (int j = 0; j < d; ++j) dX.at(i, j) += inv * n.grad.at(0, j);
    });
  }

  // Tiles a [1 x d] row `copies` times -> [copies x d].
  Var repeat_rows(Var x, int copies) {
    const Tensor& X = value(x);
    require(X.rank() == 2 && X.dim(0) == 1, "repeat_rows: expects [1 x d]");
    const int d = X.dim(1);
    require(copies >= 1, "repeat_rows: copies must be >= 1");
    Tensor C({copies, d});
    for (int i = 0; i < copies; ++i)
      for (int j = 0; j < d; ++j) C.at(i, j) = X.at(0, j);
    return push(std::move(C), [x, copies, d](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      for (int i = 0; i < copies; ++i)
        for (int j = 0; j < d; ++j) dX.at(0, j) += n.grad.at(i, j);
    });
  }

  Var sum(Var x) {
    const Tensor& X = value(x);
    T acc = 0;
    for (int64_t i = 0; i < X.numel(); ++i) acc += X[i];
    Tensor C({1});
    C[0] = acc;
    return push(std::move(C), [x](TapeT& t, const Node& n) {
      Tensor& dX = t.grad(x);
      for (int64_t i = 0; i < dX.numel(); ++i) dX[i] += n.grad[0];
    });
  }

  // sqrt(sum (pred - truth)^2) / sqrt(sum truth^2), pooled over all entries.
  Var relative_rmse(Var pred, const Tensor& truth) {
    const Tensor& P = value(pred);
    if (!P.same_shape(truth))
      throw DimensionError("relative_rmse: prediction/truth shape mismatch");
    double sse = 0, sst = 0;
    for (int64_t i = 0; i < P.numel(); ++i) {
      const double r = static_cast<double>(P[i]) - static_cast<double>(truth[i]);
      sse += r * r;
      sst += static_cast<double>(truth[i]) * static_cast<double>(truth[i]);
    }
    if (sst <= 0)
      throw NumericalError("relative_rmse: truth has zero norm; loss undefined");
    const double denom = std::sqrt(sse) * std::sqrt(sst);
    Tensor C({1});
    C[0] = static_cast<T>(std::sqrt(sse) / std::sqrt(sst));
    return push(std::move(C), [pred, truth, denom](TapeT& t, const Node& n) {
      if (denom == 0) return;  // at pred == truth the subgradient 0 is used
      Tensor& dP = t.grad(pred);
      const Tensor& P2 = t.value(pred);
      const T g = n.grad[0];
      for (int64_t i = 0; i < dP.numel(); ++i) {
        dP[i] += g * static_cast<T>((static_cast<double>(P2[i]) -
                                     static_cast<double>(truth[i])) /
                                    denom);
      }
    });
  }

  // Mean over elements of log(sigma) + (target-mean)^2 / (2 sigma^2)
  // + 0.5 log(2 pi).
  Var gaussian_nll(Var mean, Var sigma, const Tensor& target) {
    const Tensor& M = value(mean);
    const Tensor& S = value(sigma);
    if (!M.same_shape(S) || !M.same_shape(target))
      throw DimensionError("gaussian_nll: shape mismatch");
    for (int64_t i = 0; i < S.numel(); ++i)
      if (!(S[i] > T(0)))
        throw NumericalError("gaussian_nll: sigma must be positive");
    const double half_log_2pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
    double acc = 0;
    const int64_t n_el = M.numel();
    for (int64_t i = 0; i < n_el; ++i) {
      const double r = static_cast<double>(target[i]) - static_cast<double>(M[i]);
      const double s = static_cast<double>(S[i]);
      acc += std::log(s) + r * r / (2.0 * s * s) + half_log_2pi;
    }
    Tensor C({1});
    C[0] = static_cast<T>(acc / static_cast<double>(n_el));
    return push(std::move(C), [mean, sigma, target, n_el](TapeT& t, const Node& n) {
      Tensor& dM = t.grad(mean);
      Tensor& dS = t.grad(sigma);
      const Tensor& M2 = t.value(mean);
      const Tensor& S2 = t.value(sigma);
      const T g = n.grad[0] / static_cast<T>(n_el);
      for (int64_t i = 0; i < n_el; ++i) {
        const T r = M2[i] - target[i];
        const T s = S2[i];
        dM[i] += g * r / (s * s);
        dS[i] += g * (T(1) / s - r * r / (s * s * s));
      }
    });
  }

  // -- reverse pass ---------------------------------------------------------

  // Seeds d(loss)/d(loss) = seed_grad and accumulates gradients into every
  // bound parameter. Parameters with no influence on the loss receive
  // exactly zero contribution.
  void backward(Var loss, T seed_grad = T(1)) {
    const int idx = check(loss);
    if (nodes_[idx].value.numel() != 1)
      throw DimensionError("backward: loss must be scalar");
    if (backward_done_)
      throw StateError("backward: called twice without a new forward pass");
    backward_done_ = true;
    for (int i = 0; i <= idx; ++i) {
      nodes_[i].grad = TensorT<T>::zeros(nodes_[i].value.shape);
    }
    nodes_[idx].grad[0] = seed_grad;
    for (int i = idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backprop) n.backprop(*this, n);
    }
    for (int i = 0; i <= idx; ++i) {
      Node& n = nodes_[i];
      if (n.param) {
        for (int64_t e = 0; e < n.grad.numel(); ++e) n.param->grad[e] += n.grad[e];
      }
    }
  }

  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

  size_t size() const { return nodes_.size(); }

  // -- scalar helpers (exposed for oracle tests) -----------------------------

  static T normal_cdf(T x) {
    return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
  }
  static T normal_pdf(T x) {
    return std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
  }
  static T softplus_scalar(T x) {
    // log(1 + e^x), stable for large |x|
    if (x > T(20)) return x;
    if (x < T(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
  }
  static T sigmoid_scalar(T x) { return T(1) / (T(1) + std::exp(-x)); }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;

  static void require(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
  }

  int check(Var v) const {
    if (!v.valid() || v.node >= static_cast<int>(nodes_.size()))
      throw StateError("invalid tape handle");
    return v.node;
  }

  Var push(Tensor value, std::function<void(TapeT&, const Node&)> backprop,
           ParameterT<T>* param = nullptr) {
    if (finite_checks() && !value.all_finite())
      throw NumericalError("non-finite value produced by tape primitive #" +
                           std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    n.backprop = std::move(backprop);
    n.param = param;
    nodes_.push_back(std::move(n));
    backward_done_ = false;
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
};

using Tape = TapeT<float>;

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamConfigT {
  T learning_rate = T(0.001);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  T weight_decay = T(0);  // decoupled; 0 disables
};

template <class T>
struct AdamStateT {
  std::vector<TensorT<T>> first_moment;
  std::vector<TensorT<T>> second_moment;
  int64_t step = 0;

  static AdamStateT init(const std::vector<ParameterT<T>>& params) {
    AdamStateT st;
    st.first_moment.reserve(params.size());
    st.second_moment.reserve(params.size());
    for (const auto& p : params) {
      st.first_moment.push_back(TensorT<T>::zeros(p.value.shape));
      st.second_moment.push_back(TensorT<T>::zeros(p.value.shape));
    }
    return st;
  }
};

using AdamConfig = AdamConfigT<float>;
using AdamState = AdamStateT<float>;

// Standard Adam update with bias correction; zeroes gradients afterward.
template <class T>
void adam_step(std::vector<ParameterT<T>>& params, AdamStateT<T>& state,
               const AdamConfigT<T>& cfg) {
  if (params.size() != state.first_moment.size())
    throw DimensionError("adam_step: state does not match parameter list");
  state.step += 1;
  const T b1t = std::pow(cfg.beta1, static_cast<T>(state.step));
  const T b2t = std::pow(cfg.beta2, static_cast<T>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& theta = params[p].value;
    auto& g = params[p].grad;
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    for (int64_t i = 0; i < theta.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (T(1) - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (T(1) - cfg.beta2) * g[i] * g[i];
      const T mhat = m[i] / (T(1) - b1t);
      const T vhat = v[i] / (T(1) - b2t);
      T update = mhat / (std::sqrt(vhat) + cfg.epsilon);
      if (cfg.weight_decay != T(0)) update += cfg.weight_decay * theta[i];
      theta[i] -= cfg.learning_rate * update;
    }
    params[p].zero_grad();
  }
}

// Xavier-uniform weight init, deterministic from the supplied stream.
template <class T>
TensorT<T> xavier_init(int fan_in, int fan_out, Rng& rng) {
  TensorT<T> w({fan_in, fan_out});
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (int64_t i = 0; i < w.numel(); ++i)
    w[i] = static_cast<T>(rng.uniform(-limit, limit));
  return w;
}

}  // namespace recon
