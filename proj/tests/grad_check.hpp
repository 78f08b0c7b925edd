#pragma once

// Finite-difference gradient oracle, independent of the reverse-mode path it
// checks: the loss is re-evaluated at perturbed parameter values and compared
// against the tape's analytic gradients.

#include <algorithm>
#include <cmath>
#include <vector>

#include "recon/tensor.hpp"

namespace recon::testing {

// build(tape) must construct the loss from the current parameter values via
// tape.leaf(...). Returns the maximum relative error over all parameter
// components; `floor` guards the denominator for near-zero gradients.
template <class T, class BuildLoss>
double max_rel_grad_error(std::vector<ParameterT<T>>& params, BuildLoss&& build,
                          double step, double floor) {
  for (auto& p : params) p.zero_grad();
  {
    TapeT<T> tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  std::vector<TensorT<T>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad);

  auto value_of = [&]() {
    TapeT<T> tape;
    Var loss = build(tape);
    return static_cast<double>(tape.value(loss)[0]);
  };

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].value;
    for (int64_t e = 0; e < value.numel(); ++e) {
      const T saved = value[e];
      value[e] = saved + static_cast<T>(step);
      const double up = value_of();
      value[e] = saved - static_cast<T>(step);
      const double down = value_of();
      value[e] = saved;
      const double fd = (up - down) / (2.0 * step);
      const double a = static_cast<double>(analytic[pi][e]);
      const double rel =
          std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace recon::testing
