#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dualteacher/errors.hpp"

namespace dualteacher {

// Adam with bias correction. Moment buffers are public so checkpoints can
// freeze and restore the exact optimizer state.
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  std::vector<double> m, v;

  Adam() = default;
  Adam(std::size_t n, double lr_) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

  void step(std::vector<double>& params, const std::vector<double>& grads) {
    if (params.size() != m.size() || grads.size() != m.size())
      throw DimensionError("Adam::step: size mismatch");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grads[i];
      if (!std::isfinite(g)) throw DivergenceError("Adam::step: non-finite gradient");
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
};

}  // namespace dualteacher
