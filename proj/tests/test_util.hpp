#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "icre/autodiff.hpp"
#include "icre/rng.hpp"

namespace icre::testutil {

inline void rand_fill(Tensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
}

inline Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0,
                          double hi = 1.0) {
  Tensor t(std::move(shape));
  rand_fill(t, rng, lo, hi);
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-6, std::abs(a), std::abs(b)});
}

/// Central-difference gradient check. `build` must construct the scalar loss
/// on the given tape from the current values of `params` (leaf-by-pointer),
/// and must be pure: same param values -> same loss.
/// Returns the max relative error over all checked entries.
inline double gradcheck(const std::vector<Tensor*>& params,
                        const std::function<Var(Tape&)>& build,
                        int64_t max_entries_per_tensor = 0) {
  Tape tape;
  Var root = build(tape);
  tape.backward(root);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.push_back(tape.grad_of(p));

  auto eval = [&]() {
    Tape t2;
    t2.set_grad_enabled(false);
    return build(t2).item();
  };

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    int64_t n = p.numel();
    int64_t step = 1;
    if (max_entries_per_tensor > 0 && n > max_entries_per_tensor)
      step = (n + max_entries_per_tensor - 1) / max_entries_per_tensor;
    for (int64_t i = 0; i < n; i += step) {
      double orig = p[i];
      double h = 1e-5 * std::max(1.0, std::abs(orig));
      p[i] = orig + h;
      double fp = eval();
      p[i] = orig - h;
      double fm = eval();
      p[i] = orig;
      double num = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[pi][i], num));
    }
  }
  return worst;
}

}  // namespace icre::testutil
