#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dualteacher/errors.hpp"

namespace dualteacher {

// Temporal parameter average theta' = alpha * theta' + (1 - alpha) * theta.
// teacher_params is a plain vector so it composes with the flat Network
// storage; no optimizer ever touches it.
struct EmaState {
  double alpha = 0.99;
  std::int64_t step = 0;
  std::vector<double> teacher_params;
};

inline EmaState ema_init(const std::vector<double>& student, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0))
    throw ConfigError("ema_init: alpha must lie in [0, 1)");
  return EmaState{alpha, 0, student};
}

inline void ema_update(EmaState& state, const std::vector<double>& student) {
  if (student.size() != state.teacher_params.size())
    throw DimensionError("ema_update: parameter size mismatch");
  for (double v : student)
    if (!std::isfinite(v)) throw DivergenceError("ema_update: non-finite student parameters");
  const double a = state.alpha;
  for (std::size_t i = 0; i < student.size(); ++i)
    state.teacher_params[i] = a * state.teacher_params[i] + (1.0 - a) * student[i];
  ++state.step;
}

}  // namespace dualteacher
