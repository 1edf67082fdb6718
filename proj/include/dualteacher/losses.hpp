#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"

namespace dualteacher {

// Pluggable warning sink; defaults to stderr. Training code reports benign
// oddities (clamped schedule argument, ignored streams) through this.
inline std::function<void(const std::string&)>& warn_handler() {
  static std::function<void(const std::string&)> handler = [](const std::string& msg) {
    std::cerr << "[dualteacher] warning: " << msg << "\n";
  };
  return handler;
}

inline void warn(const std::string& msg) { warn_handler()(msg); }

struct LossWeights {
  double lambda_kd = 0.1;
  double lambda_con_max = 0.1;
  double ramp_exponent_scale = 5.0;
  int t_max = 50;

  void validate() const {
    if (lambda_kd < 0 || lambda_con_max < 0 || ramp_exponent_scale < 0)
      throw ConfigError("LossWeights: weights must be nonnegative");
    if (t_max < 1) throw ConfigError("LossWeights: t_max must be >= 1");
  }
};

constexpr double kLogClamp = 1e-12;
constexpr double kDiceEps = 1e-5;

// Optional per-pixel inclusion mask (1 = pixel participates in the loss).
using PixelMask = std::vector<std::uint8_t>;

namespace detail {

inline std::size_t count_included(const PixelMask* mask, std::size_t npix) {
  if (!mask) return npix;
  std::size_t n = 0;
  for (std::size_t i = 0; i < npix; ++i) n += (*mask)[i] ? 1 : 0;
  return n;
}

inline bool included(const PixelMask* mask, std::size_t i) { return !mask || (*mask)[i]; }

}  // namespace detail

// Mean over pixels of -log p[target], log-clamped at 1e-12.
inline double cross_entropy(const ProbMap& prob, const LabelMap& target,
                            const PixelMask* mask = nullptr) {
  require_same_shape(prob, target, "cross_entropy");
  const std::size_t npix = prob.npix();
  const std::size_t n = detail::count_included(mask, npix);
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < npix; ++i) {
    if (!detail::included(mask, i)) continue;
    double p = prob.p[i * prob.c + target.lab[i]];
    sum -= std::log(std::max(p, kLogClamp));
  }
  return sum / static_cast<double>(n);
}

// Adds scale * dL/dprob into dprob.
inline void cross_entropy_grad(const ProbMap& prob, const LabelMap& target, double scale,
                               ProbMap& dprob, const PixelMask* mask = nullptr) {
  require_same_shape(prob, target, "cross_entropy_grad");
  require_same_shape(prob, dprob, "cross_entropy_grad");
  const std::size_t npix = prob.npix();
  const std::size_t n = detail::count_included(mask, npix);
  if (n == 0) return;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < npix; ++i) {
    if (!detail::included(mask, i)) continue;
    const std::size_t idx = i * prob.c + target.lab[i];
    double p = prob.p[idx];
    if (p > kLogClamp) dprob.p[idx] -= scale * inv_n / p;
    // inside the clamp the loss is locally constant in p
  }
}

// Soft multi-class Dice: d_c = (2 sum p*g + eps) / (sum p + sum g + eps),
// loss = 1 - mean_c d_c. Background participates by default; the flag exists
// because foreground-only averaging is a common alternative convention.
inline double dice_loss(const ProbMap& prob, const LabelMap& target,
                        bool include_background = true, const PixelMask* mask = nullptr) {
  require_same_shape(prob, target, "dice_loss");
  const int C = prob.c;
  const std::size_t npix = prob.npix();
  std::vector<double> inter(C, 0.0), psum(C, 0.0), gsum(C, 0.0);
  for (std::size_t i = 0; i < npix; ++i) {
    if (!detail::included(mask, i)) continue;
    const double* p = prob.p.data() + i * C;
    const int g = target.lab[i];
    for (int c = 0; c < C; ++c) psum[c] += p[c];
    inter[g] += p[g];
    gsum[g] += 1.0;
  }
  const int c0 = include_background ? 0 : 1;
  double mean = 0.0;
  for (int c = c0; c < C; ++c)
    mean += (2.0 * inter[c] + kDiceEps) / (psum[c] + gsum[c] + kDiceEps);
  mean /= static_cast<double>(C - c0);
  return 1.0 - mean;
}

inline void dice_loss_grad(const ProbMap& prob, const LabelMap& target, double scale,
                           ProbMap& dprob, bool include_background = true,
                           const PixelMask* mask = nullptr) {
  require_same_shape(prob, target, "dice_loss_grad");
  require_same_shape(prob, dprob, "dice_loss_grad");
  const int C = prob.c;
  const std::size_t npix = prob.npix();
  std::vector<double> inter(C, 0.0), psum(C, 0.0), gsum(C, 0.0);
  for (std::size_t i = 0; i < npix; ++i) {
    if (!detail::included(mask, i)) continue;
    const double* p = prob.p.data() + i * C;
    const int g = target.lab[i];
    for (int c = 0; c < C; ++c) psum[c] += p[c];
    inter[g] += p[g];
    gsum[g] += 1.0;
  }
  const int c0 = include_background ? 0 : 1;
  const double inv_classes = 1.0 / static_cast<double>(C - c0);
  // d d_c / dp_ic = (2 g_ic (B_c+eps) - (2 A_c+eps)) / (B_c+eps)^2
  std::vector<double> num(C, 0.0), den(C, 0.0);
  for (int c = 0; c < C; ++c) {
    num[c] = 2.0 * inter[c] + kDiceEps;
    den[c] = psum[c] + gsum[c] + kDiceEps;
  }
  for (std::size_t i = 0; i < npix; ++i) {
    if (!detail::included(mask, i)) continue;
    double* dp = dprob.p.data() + i * C;
    const int g = target.lab[i];
    for (int c = c0; c < C; ++c) {
      const double g_ic = (c == g) ? 1.0 : 0.0;
      const double dd = (2.0 * g_ic * den[c] - num[c]) / (den[c] * den[c]);
      dp[c] -= scale * inv_classes * dd;
    }
  }
}

// Combined segmentation objective: cross-entropy plus soft Dice.
inline double seg_loss(const ProbMap& prob, const LabelMap& target,
                       bool include_background = true, const PixelMask* mask = nullptr) {
  return cross_entropy(prob, target, mask) + dice_loss(prob, target, include_background, mask);
}

inline void seg_loss_grad(const ProbMap& prob, const LabelMap& target, double scale,
                          ProbMap& dprob, bool include_background = true,
                          const PixelMask* mask = nullptr) {
  cross_entropy_grad(prob, target, scale, dprob, mask);
  dice_loss_grad(prob, target, scale, dprob, include_background, mask);
}

// Knowledge distillation as soft-target cross-entropy, teacher held constant:
// mean over pixels of -sum_c p_tea[c] log p_stu[c].
inline double kd_loss(const ProbMap& p_teacher, const ProbMap& p_student) {
  require_same_shape(p_teacher, p_student, "kd_loss");
  const std::size_t npix = p_teacher.npix();
  const int C = p_teacher.c;
  double sum = 0.0;
  for (std::size_t i = 0; i < npix; ++i) {
    const double* pt = p_teacher.p.data() + i * C;
    const double* ps = p_student.p.data() + i * C;
    for (int c = 0; c < C; ++c) sum -= pt[c] * std::log(std::max(ps[c], kLogClamp));
  }
  return sum / static_cast<double>(npix);
}

// Gradient flows to the student argument only; the teacher distribution is a
// constant of the optimization (stop-gradient).
inline void kd_loss_grad_student(const ProbMap& p_teacher, const ProbMap& p_student,
                                 double scale, ProbMap& dstudent) {
  require_same_shape(p_teacher, p_student, "kd_loss_grad_student");
  require_same_shape(p_student, dstudent, "kd_loss_grad_student");
  const std::size_t npix = p_teacher.npix();
  const int C = p_teacher.c;
  const double inv_n = 1.0 / static_cast<double>(npix);
  for (std::size_t i = 0; i < npix; ++i) {
    const double* pt = p_teacher.p.data() + i * C;
    const double* ps = p_student.p.data() + i * C;
    double* d = dstudent.p.data() + i * C;
    for (int c = 0; c < C; ++c)
      if (ps[c] > kLogClamp) d[c] -= scale * inv_n * pt[c] / ps[c];
  }
}

// Mean over pixels and classes of the squared prediction difference.
inline double consistency_loss(const ProbMap& out_student, const ProbMap& out_teacher) {
  require_same_shape(out_student, out_teacher, "consistency_loss");
  double sum = 0.0;
  for (std::size_t i = 0; i < out_student.p.size(); ++i) {
    const double d = out_student.p[i] - out_teacher.p[i];
    sum += d * d;
  }
  return sum / static_cast<double>(out_student.p.size());
}

// Teacher side is again a constant; only the student receives gradient.
inline void consistency_loss_grad_student(const ProbMap& out_student, const ProbMap& out_teacher,
                                          double scale, ProbMap& dstudent) {
  require_same_shape(out_student, out_teacher, "consistency_loss_grad_student");
  require_same_shape(out_student, dstudent, "consistency_loss_grad_student");
  const double inv_n = 1.0 / static_cast<double>(out_student.p.size());
  for (std::size_t i = 0; i < out_student.p.size(); ++i)
    dstudent.p[i] += scale * 2.0 * inv_n * (out_student.p[i] - out_teacher.p[i]);
}

// Sigmoid-shaped ramp-up: lambda_con(t) = lambda_max * exp(-k (1 - t/t_max)^2).
// Out-of-range epochs are clamped and reported, not rejected.
inline double lambda_con(double t, const LossWeights& w) {
  w.validate();
  if (t < 0.0 || t > static_cast<double>(w.t_max)) {
    warn("lambda_con: epoch " + std::to_string(t) + " outside [0, " + std::to_string(w.t_max) +
         "], clamping");
    t = std::clamp(t, 0.0, static_cast<double>(w.t_max));
  }
  const double u = 1.0 - t / static_cast<double>(w.t_max);
  return w.lambda_con_max * std::exp(-w.ramp_exponent_scale * u * u);
}

// Student objective: seg + lambda_kd * kd + lambda_con(t) * con.
inline double student_total_loss(double seg, double kd, double con, double t,
                                 const LossWeights& w) {
  if (!std::isfinite(seg)) throw DivergenceError("student_total_loss: seg term is non-finite");
  if (!std::isfinite(kd)) throw DivergenceError("student_total_loss: kd term is non-finite");
  if (!std::isfinite(con)) throw DivergenceError("student_total_loss: con term is non-finite");
  return seg + w.lambda_kd * kd + lambda_con(t, w) * con;
}

}  // namespace dualteacher
