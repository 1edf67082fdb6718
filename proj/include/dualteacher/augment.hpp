#pragma once

#include <cmath>
#include <optional>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"
#include "dualteacher/rng.hpp"

namespace dualteacher {

// Small random affine jitter for labeled training samples: rotation, isotropic
// scale, and integer-free translation. Images resample bilinearly with
// clamp-to-edge; label maps use nearest neighbor so classes stay crisp.
struct AugmentConfig {
  double max_rotation_deg = 15.0;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  double max_shift_px = 4.0;

  void validate() const {
    if (max_rotation_deg < 0 || max_shift_px < 0)
      throw ConfigError("AugmentConfig: magnitudes must be nonnegative");
    if (!(scale_lo > 0 && scale_lo <= scale_hi))
      throw ConfigError("AugmentConfig: need 0 < scale_lo <= scale_hi");
  }
};

namespace detail {

inline double sample_edge_clamped(const Image& im, double sy, double sx) {
  // bilinear with clamp-to-edge
  const double fy = std::clamp(sy, 0.0, static_cast<double>(im.h - 1));
  const double fx = std::clamp(sx, 0.0, static_cast<double>(im.w - 1));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y1 = std::min(y0 + 1, im.h - 1);
  const int x1 = std::min(x0 + 1, im.w - 1);
  const double wy = fy - y0, wx = fx - x0;
  return (1 - wy) * ((1 - wx) * im.at(y0, x0) + wx * im.at(y0, x1)) +
         wy * ((1 - wx) * im.at(y1, x0) + wx * im.at(y1, x1));
}

}  // namespace detail

struct AffineParams {
  double angle_rad = 0.0;
  double scale = 1.0;
  double shift_y = 0.0;
  double shift_x = 0.0;
};

inline AffineParams sample_affine(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AffineParams p;
  p.angle_rad = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0;
  p.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  p.shift_y = rng.uniform(-cfg.max_shift_px, cfg.max_shift_px);
  p.shift_x = rng.uniform(-cfg.max_shift_px, cfg.max_shift_px);
  return p;
}

// Applies the transform by inverse mapping each output pixel center back into
// the input frame (rotate/scale about the image center, then shift).
inline void apply_affine(const AffineParams& p, const Image& image, const LabelMap* label,
                         Image& out_image, LabelMap* out_label) {
  const double cy = image.h / 2.0, cx = image.w / 2.0;
  const double cosA = std::cos(p.angle_rad), sinA = std::sin(p.angle_rad);
  out_image = Image{image.h, image.w, std::vector<double>(image.pix.size())};
  if (label) {
    if (label->h != image.h || label->w != image.w)
      throw DimensionError("apply_affine: image/label shape mismatch");
    *out_label = LabelMap{image.h, image.w, std::vector<std::uint8_t>(label->lab.size())};
  }
  for (int y = 0; y < image.h; ++y)
    for (int x = 0; x < image.w; ++x) {
      const double oy = y + 0.5 - cy - p.shift_y;
      const double ox = x + 0.5 - cx - p.shift_x;
      // inverse rotation and scale
      const double sy = (cosA * oy + sinA * ox) / p.scale + cy - 0.5;
      const double sx = (-sinA * oy + cosA * ox) / p.scale + cx - 0.5;
      out_image.at(y, x) = detail::sample_edge_clamped(image, sy, sx);
      if (label) {
        const int ny = std::clamp(static_cast<int>(std::lround(sy)), 0, image.h - 1);
        const int nx = std::clamp(static_cast<int>(std::lround(sx)), 0, image.w - 1);
        out_label->lab[static_cast<std::size_t>(y) * image.w + x] =
            label->lab[static_cast<std::size_t>(ny) * image.w + nx];
      }
    }
}

inline std::pair<Image, std::optional<LabelMap>> random_affine(const Image& image,
                                                               const LabelMap* label, Rng& rng,
                                                               const AugmentConfig& cfg = {}) {
  const AffineParams p = sample_affine(cfg, rng);
  Image out_im;
  LabelMap out_lab;
  apply_affine(p, image, label, out_im, label ? &out_lab : nullptr);
  if (label) return {std::move(out_im), std::move(out_lab)};
  return {std::move(out_im), std::nullopt};
}

}  // namespace dualteacher
