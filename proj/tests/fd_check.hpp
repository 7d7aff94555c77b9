#pragma once

// Central finite-difference gradient oracle shared by the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "embedkit/tensor.hpp"

namespace testutil {

// Error measure for gradient checks: relative for large gradients, absolute
// near zero (denominator floored at 1).
inline double grad_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) / denom;
}

// Runs f once under a tape to collect autodiff gradients of every leaf, then
// perturbs each leaf element by ±eps and compares (f(x+eps)-f(x-eps))/2eps
// against the recorded gradient. Returns the worst error over all elements.
// f must return a scalar tensor and must depend on the leaves only through
// their shared storage (pass the same Tensor handles).
inline double check_gradients(const std::function<embedkit::Tensor()>& f,
                              std::vector<embedkit::Tensor> leaves, double eps = 1e-5) {
  using embedkit::GradTape;
  using embedkit::Tensor;
  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    for (auto& l : leaves) l.zero_grad();
    Tensor loss = f();
    tape.backward(loss);
    for (auto& l : leaves) analytic.push_back(l.grad());
  }
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
      const double orig = leaf.values()[i];
      leaf.values()[i] = orig + eps;
      const double up = f().item();
      leaf.values()[i] = orig - eps;
      const double dn = f().item();
      leaf.values()[i] = orig;
      const double numeric = (up - dn) / (2.0 * eps);
      worst = std::max(worst, grad_err(analytic[li][i], numeric));
    }
  }
  return worst;
}

}  // namespace testutil
