#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dualteacher/errors.hpp"

namespace dualteacher {

// Grayscale intensity grid, values in [0, 1], row-major.
struct Image {
  int h = 0, w = 0;
  std::vector<double> pix;

  Image() = default;
  Image(int h_, int w_, double fill = 0.0) : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * w_, fill) {}
  Image(int h_, int w_, std::vector<double> pix_) : h(h_), w(w_), pix(std::move(pix_)) {}

  double& at(int y, int x) { return pix[static_cast<std::size_t>(y) * w + x]; }
  double at(int y, int x) const { return pix[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return pix.size(); }

  bool finite() const {
    for (double v : pix)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Per-pixel class indices.
struct LabelMap {
  int h = 0, w = 0;
  std::vector<std::uint8_t> lab;

  LabelMap() = default;
  LabelMap(int h_, int w_, std::uint8_t fill = 0)
      : h(h_), w(w_), lab(static_cast<std::size_t>(h_) * w_, fill) {}
  LabelMap(int h_, int w_, std::vector<std::uint8_t> lab_) : h(h_), w(w_), lab(std::move(lab_)) {}

  std::uint8_t& at(int y, int x) { return lab[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return lab[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return lab.size(); }

  bool operator==(const LabelMap& o) const { return h == o.h && w == o.w && lab == o.lab; }
};

// Per-pixel probability vector over c classes; pixel-major, classes contiguous.
struct ProbMap {
  int h = 0, w = 0, c = 0;
  std::vector<double> p;

  ProbMap() = default;
  ProbMap(int h_, int w_, int c_)
      : h(h_), w(w_), c(c_), p(static_cast<std::size_t>(h_) * w_ * c_, 0.0) {}
  ProbMap(int h_, int w_, int c_, std::vector<double> p_)
      : h(h_), w(w_), c(c_), p(std::move(p_)) {}

  double* pixel(int y, int x) { return p.data() + (static_cast<std::size_t>(y) * w + x) * c; }
  const double* pixel(int y, int x) const {
    return p.data() + (static_cast<std::size_t>(y) * w + x) * c;
  }
  std::size_t npix() const { return static_cast<std::size_t>(h) * w; }

  bool same_shape(const ProbMap& o) const { return h == o.h && w == o.w && c == o.c; }
};

inline void require_same_shape(const ProbMap& a, const ProbMap& b, const char* where) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(where) + ": probability map shapes differ");
}

inline void require_same_shape(const ProbMap& a, const LabelMap& t, const char* where) {
  if (a.h != t.h || a.w != t.w)
    throw DimensionError(std::string(where) + ": probability/label shapes differ");
}

}  // namespace dualteacher
