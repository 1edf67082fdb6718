#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"

namespace dualteacher {

// Batched activation tensor, NHWC with channels fastest. All layer code keeps
// this layout so conv im2col rows map to pixels and GEMM output lands in place.
struct Tensor {
  int n = 0, h = 0, w = 0, c = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int h_, int w_, int c_)
      : n(n_), h(h_), w(w_), c(c_),
        v(static_cast<std::size_t>(n_) * h_ * w_ * c_, 0.0) {}

  std::size_t size() const { return v.size(); }
  std::size_t npix() const { return static_cast<std::size_t>(n) * h * w; }

  double& at(int in, int y, int x, int ic) {
    return v[((static_cast<std::size_t>(in) * h + y) * w + x) * c + ic];
  }
  double at(int in, int y, int x, int ic) const {
    return v[((static_cast<std::size_t>(in) * h + y) * w + x) * c + ic];
  }

  bool same_shape(const Tensor& o) const {
    return n == o.n && h == o.h && w == o.w && c == o.c;
  }

  bool finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

inline Tensor to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw InputError("to_tensor: empty batch");
  const int h = images[0]->h, w = images[0]->w;
  Tensor t(static_cast<int>(images.size()), h, w, 1);
  std::size_t k = 0;
  for (const Image* im : images) {
    if (im->h != h || im->w != w) throw DimensionError("to_tensor: mixed image sizes in batch");
    for (double px : im->pix) t.v[k++] = px;
  }
  return t;
}

inline Tensor to_tensor(const Image& image) { return to_tensor(std::vector<const Image*>{&image}); }

// View image `in` of a batched per-pixel distribution tensor as a ProbMap copy.
inline ProbMap image_probs(const Tensor& t, int in) {
  if (in < 0 || in >= t.n) throw DimensionError("image_probs: batch index out of range");
  ProbMap pm{t.h, t.w, t.c, std::vector<double>(static_cast<std::size_t>(t.h) * t.w * t.c)};
  const std::size_t stride = pm.p.size();
  std::copy_n(t.v.begin() + static_cast<std::ptrdiff_t>(stride) * in, stride, pm.p.begin());
  return pm;
}

inline void add_image_grad(Tensor& t, int in, const ProbMap& dpm) {
  if (in < 0 || in >= t.n) throw DimensionError("add_image_grad: batch index out of range");
  if (dpm.h != t.h || dpm.w != t.w || dpm.c != t.c)
    throw DimensionError("add_image_grad: shape mismatch");
  const std::size_t stride = dpm.p.size();
  double* dst = t.v.data() + stride * in;
  for (std::size_t i = 0; i < stride; ++i) dst[i] += dpm.p[i];
}

}  // namespace dualteacher
