#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dualteacher/errors.hpp"
#include "dualteacher/image.hpp"
#include "dualteacher/rng.hpp"
#include "dualteacher/tensor.hpp"

namespace dualteacher {

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = 5;
  int base_channels = 8;
  int depth = 2;
  enum class Norm { group, batch };
  Norm norm = Norm::group;
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels < 1) throw ConfigError("NetworkConfig: in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("NetworkConfig: num_classes must be >= 2");
    if (base_channels < 2) throw ConfigError("NetworkConfig: base_channels must be >= 2");
    if (depth < 1) throw ConfigError("NetworkConfig: depth must be >= 1");
  }
};

inline std::string to_string(NetworkConfig::Norm n) {
  return n == NetworkConfig::Norm::group ? "group" : "batch";
}

inline NetworkConfig::Norm norm_from_string(const std::string& s) {
  if (s == "group") return NetworkConfig::Norm::group;
  if (s == "batch") return NetworkConfig::Norm::batch;
  throw ConfigError("unknown norm kind: " + s);
}

// Named slice of the flat parameter vector; lets tests and checkpoints address
// individual layers while EMA/optimizer code works on the whole vector.
struct ParamSpan {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

namespace detail {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

// 3x3 same-padding or 1x1 convolution, weights bound into network-owned flat
// storage. Weight layout is (k*k*cin) x cout so im2col output rows multiply
// straight into NHWC activations.
struct Conv2d {
  int cin = 0, cout = 0, k = 3;
  double* w = nullptr;
  double* b = nullptr;
  double* gw = nullptr;
  double* gb = nullptr;

  int xn = 0, xh = 0, xw = 0;
  std::vector<double> patches;  // (n*h*w) x (k*k*cin); for k==1 the input itself

  std::size_t weight_count() const { return static_cast<std::size_t>(k) * k * cin * cout; }
  std::size_t bias_count() const { return static_cast<std::size_t>(cout); }

  void im2col(const Tensor& x) {
    const int K = k * k * cin;
    patches.assign(x.npix() * static_cast<std::size_t>(K), 0.0);
    const int pad = k / 2;
    std::size_t row = 0;
    for (int in = 0; in < x.n; ++in)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx, ++row) {
          double* dst = patches.data() + row * K;
          for (int dy = 0; dy < k; ++dy) {
            const int sy = y + dy - pad;
            if (sy < 0 || sy >= x.h) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int sx = xx + dx - pad;
              if (sx < 0 || sx >= x.w) continue;
              const double* src = &x.v[((static_cast<std::size_t>(in) * x.h + sy) * x.w + sx) * cin];
              std::copy_n(src, cin, dst + (dy * k + dx) * cin);
            }
          }
        }
  }

  Tensor forward(const Tensor& x) {
    if (x.c != cin) throw DimensionError("Conv2d: input channels mismatch");
    xn = x.n; xh = x.h; xw = x.w;
    const int K = k * k * cin;
    const std::size_t npix = x.npix();
    if (k == 1) {
      patches = x.v;  // rows are already pixel-wise cin vectors
    } else {
      im2col(x);
    }
    Tensor out(x.n, x.h, x.w, cout);
    ConstMapRM P(patches.data(), static_cast<Eigen::Index>(npix), K);
    ConstMapRM W(w, K, cout);
    MapRM O(out.v.data(), static_cast<Eigen::Index>(npix), cout);
    O.noalias() = P * W;
    O.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b, cout);
    return out;
  }

  Tensor backward(const Tensor& dy) {
    const int K = k * k * cin;
    const std::size_t npix = dy.npix();
    ConstMapRM dY(dy.v.data(), static_cast<Eigen::Index>(npix), cout);
    ConstMapRM P(patches.data(), static_cast<Eigen::Index>(npix), K);
    MapRM gW(gw, K, cout);
    gW.noalias() += P.transpose() * dY;
    // fixed-order bias reduction; a vectorized partial sum would round
    // differently depending on the buffer's runtime alignment
    for (std::size_t r = 0; r < npix; ++r)
      for (int ci = 0; ci < cout; ++ci) gb[ci] += dy.v[r * static_cast<std::size_t>(cout) + ci];

    ConstMapRM W(w, K, cout);
    Tensor dx(xn, xh, xw, cin);
    if (k == 1) {
      MapRM dX(dx.v.data(), static_cast<Eigen::Index>(npix), cin);
      dX.noalias() = dY * W.transpose();
      return dx;
    }
    std::vector<double> dpatches(npix * static_cast<std::size_t>(K));
    MapRM dP(dpatches.data(), static_cast<Eigen::Index>(npix), K);
    dP.noalias() = dY * W.transpose();
    // col2im scatter-add
    const int pad = k / 2;
    std::size_t row = 0;
    for (int in = 0; in < xn; ++in)
      for (int y = 0; y < xh; ++y)
        for (int xx = 0; xx < xw; ++xx, ++row) {
          const double* src = dpatches.data() + row * K;
          for (int dy2 = 0; dy2 < k; ++dy2) {
            const int sy = y + dy2 - pad;
            if (sy < 0 || sy >= xh) continue;
            for (int dx2 = 0; dx2 < k; ++dx2) {
              const int sx = xx + dx2 - pad;
              if (sx < 0 || sx >= xw) continue;
              double* dst = &dx.v[((static_cast<std::size_t>(in) * xh + sy) * xw + sx) * cin];
              const double* s = src + (dy2 * k + dx2) * cin;
              for (int ci = 0; ci < cin; ++ci) dst[ci] += s[ci];
            }
          }
        }
    return dx;
  }
};

// Group or batch normalization over NHWC activations. Group stats are per
// (image, group); batch stats pool the whole batch per channel and maintain
// running estimates for eval-mode forwards.
struct NormLayer {
  NetworkConfig::Norm kind = NetworkConfig::Norm::group;
  int c = 0, groups = 1;
  double eps = 1e-5, momentum = 0.9;
  double* gamma = nullptr;
  double* beta = nullptr;
  double* ggamma = nullptr;
  double* gbeta = nullptr;
  std::vector<double> run_mean, run_var;

  Tensor xhat;
  std::vector<double> inv_std;  // per (n, group) or per channel
  bool trained_forward = true;

  std::size_t param_count() const { return 2 * static_cast<std::size_t>(c); }

  void init_buffers() {
    if (kind == NetworkConfig::Norm::batch) {
      run_mean.assign(c, 0.0);
      run_var.assign(c, 1.0);
    }
  }

  Tensor forward(const Tensor& x, bool training) {
    if (x.c != c) throw DimensionError("NormLayer: channel mismatch");
    trained_forward = training;
    Tensor y(x.n, x.h, x.w, x.c);
    xhat = Tensor(x.n, x.h, x.w, x.c);
    if (kind == NetworkConfig::Norm::group) {
      const int cpg = c / groups;
      inv_std.assign(static_cast<std::size_t>(x.n) * groups, 0.0);
      const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
      for (int in = 0; in < x.n; ++in)
        for (int g = 0; g < groups; ++g) {
          double mean = 0.0, var = 0.0;
          const std::size_t m = plane * cpg;
          for (std::size_t p = 0; p < plane; ++p)
            for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci)
              mean += x.v[(in * plane + p) * c + ci];
          mean /= static_cast<double>(m);
          for (std::size_t p = 0; p < plane; ++p)
            for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
              const double d = x.v[(in * plane + p) * c + ci] - mean;
              var += d * d;
            }
          var /= static_cast<double>(m);
          const double istd = 1.0 / std::sqrt(var + eps);
          inv_std[in * groups + g] = istd;
          for (std::size_t p = 0; p < plane; ++p)
            for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
              const std::size_t idx = (in * plane + p) * c + ci;
              xhat.v[idx] = (x.v[idx] - mean) * istd;
              y.v[idx] = gamma[ci] * xhat.v[idx] + beta[ci];
            }
        }
      return y;
    }
    // batch norm
    const std::size_t rows = x.npix();
    inv_std.assign(c, 0.0);
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    if (training) {
      for (std::size_t r = 0; r < rows; ++r)
        for (int ci = 0; ci < c; ++ci) mean[ci] += x.v[r * c + ci];
      for (int ci = 0; ci < c; ++ci) mean[ci] /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (int ci = 0; ci < c; ++ci) {
          const double d = x.v[r * c + ci] - mean[ci];
          var[ci] += d * d;
        }
      for (int ci = 0; ci < c; ++ci) var[ci] /= static_cast<double>(rows);
      for (int ci = 0; ci < c; ++ci) {
        run_mean[ci] = momentum * run_mean[ci] + (1.0 - momentum) * mean[ci];
        run_var[ci] = momentum * run_var[ci] + (1.0 - momentum) * var[ci];
      }
    } else {
      mean = run_mean;
      var = run_var;
    }
    for (int ci = 0; ci < c; ++ci) inv_std[ci] = 1.0 / std::sqrt(var[ci] + eps);
    for (std::size_t r = 0; r < rows; ++r)
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t idx = r * c + ci;
        xhat.v[idx] = (x.v[idx] - mean[ci]) * inv_std[ci];
        y.v[idx] = gamma[ci] * xhat.v[idx] + beta[ci];
      }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    Tensor dx(dy.n, dy.h, dy.w, dy.c);
    if (kind == NetworkConfig::Norm::group) {
      const int cpg = c / groups;
      const std::size_t plane = static_cast<std::size_t>(dy.h) * dy.w;
      for (int in = 0; in < dy.n; ++in)
        for (int g = 0; g < groups; ++g) {
          const double istd = inv_std[in * groups + g];
          const double m = static_cast<double>(plane * cpg);
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (std::size_t p = 0; p < plane; ++p)
            for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
              const std::size_t idx = (in * plane + p) * c + ci;
              const double dxhat = dy.v[idx] * gamma[ci];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat.v[idx];
              ggamma[ci] += dy.v[idx] * xhat.v[idx];
              gbeta[ci] += dy.v[idx];
            }
          for (std::size_t p = 0; p < plane; ++p)
            for (int ci = g * cpg; ci < (g + 1) * cpg; ++ci) {
              const std::size_t idx = (in * plane + p) * c + ci;
              const double dxhat = dy.v[idx] * gamma[ci];
              dx.v[idx] = istd * (dxhat - sum_dxhat / m - xhat.v[idx] * sum_dxhat_xhat / m);
            }
        }
      return dx;
    }
    const std::size_t rows = dy.npix();
    if (!trained_forward) {
      // running stats were constants; the transform is affine per channel
      for (std::size_t r = 0; r < rows; ++r)
        for (int ci = 0; ci < c; ++ci) {
          const std::size_t idx = r * c + ci;
          ggamma[ci] += dy.v[idx] * xhat.v[idx];
          gbeta[ci] += dy.v[idx];
          dx.v[idx] = dy.v[idx] * gamma[ci] * inv_std[ci];
        }
      return dx;
    }
    std::vector<double> sum_dxhat(c, 0.0), sum_dxhat_xhat(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t idx = r * c + ci;
        const double dxhat = dy.v[idx] * gamma[ci];
        sum_dxhat[ci] += dxhat;
        sum_dxhat_xhat[ci] += dxhat * xhat.v[idx];
        ggamma[ci] += dy.v[idx] * xhat.v[idx];
        gbeta[ci] += dy.v[idx];
      }
    const double m = static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (int ci = 0; ci < c; ++ci) {
        const std::size_t idx = r * c + ci;
        const double dxhat = dy.v[idx] * gamma[ci];
        dx.v[idx] = inv_std[ci] * (dxhat - sum_dxhat[ci] / m - xhat.v[idx] * sum_dxhat_xhat[ci] / m);
      }
    return dx;
  }
};

struct Relu {
  std::vector<std::uint8_t> mask;

  Tensor forward(const Tensor& x) {
    Tensor y = x;
    mask.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x.v[i] > 0.0)
        mask[i] = 1;
      else
        y.v[i] = 0.0;
    return y;
  }

  Tensor backward(const Tensor& dy) {
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!mask[i]) dx.v[i] = 0.0;
    return dx;
  }
};

struct MaxPool2 {
  int xn = 0, xh = 0, xw = 0, xc = 0;
  std::vector<std::size_t> argmax;

  Tensor forward(const Tensor& x) {
    if (x.h % 2 != 0 || x.w % 2 != 0)
      throw DimensionError("MaxPool2: spatial size must be even");
    xn = x.n; xh = x.h; xw = x.w; xc = x.c;
    Tensor y(x.n, x.h / 2, x.w / 2, x.c);
    argmax.assign(y.size(), 0);
    std::size_t o = 0;
    for (int in = 0; in < x.n; ++in)
      for (int y2 = 0; y2 < y.h; ++y2)
        for (int x2 = 0; x2 < y.w; ++x2)
          for (int ci = 0; ci < x.c; ++ci, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t bidx = 0;
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t idx =
                    ((static_cast<std::size_t>(in) * x.h + 2 * y2 + dy) * x.w + 2 * x2 + dx) * x.c + ci;
                if (x.v[idx] > best) {
                  best = x.v[idx];
                  bidx = idx;
                }
              }
            y.v[o] = best;
            argmax[o] = bidx;
          }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    Tensor dx(xn, xh, xw, xc);
    for (std::size_t o = 0; o < dy.size(); ++o) dx.v[argmax[o]] += dy.v[o];
    return dx;
  }
};

struct Upsample2 {
  Tensor forward(const Tensor& x) {
    Tensor y(x.n, x.h * 2, x.w * 2, x.c);
    for (int in = 0; in < x.n; ++in)
      for (int yy = 0; yy < y.h; ++yy)
        for (int xx = 0; xx < y.w; ++xx) {
          const double* src = &x.v[((static_cast<std::size_t>(in) * x.h + yy / 2) * x.w + xx / 2) * x.c];
          double* dst = &y.v[((static_cast<std::size_t>(in) * y.h + yy) * y.w + xx) * x.c];
          std::copy_n(src, x.c, dst);
        }
    return y;
  }

  Tensor backward(const Tensor& dy) {
    Tensor dx(dy.n, dy.h / 2, dy.w / 2, dy.c);
    for (int in = 0; in < dy.n; ++in)
      for (int yy = 0; yy < dy.h; ++yy)
        for (int xx = 0; xx < dy.w; ++xx) {
          const double* src = &dy.v[((static_cast<std::size_t>(in) * dy.h + yy) * dy.w + xx) * dy.c];
          double* dst = &dx.v[((static_cast<std::size_t>(in) * dx.h + yy / 2) * dx.w + xx / 2) * dy.c];
          for (int ci = 0; ci < dy.c; ++ci) dst[ci] += src[ci];
        }
    return dx;
  }
};

struct ConvBlock {
  Conv2d c1, c2;
  NormLayer n1, n2;
  Relu r1, r2;

  Tensor forward(const Tensor& x, bool training) {
    Tensor t = c1.forward(x);
    t = n1.forward(t, training);
    t = r1.forward(t);
    t = c2.forward(t);
    t = n2.forward(t, training);
    return r2.forward(t);
  }

  Tensor backward(const Tensor& dy) {
    Tensor d = r2.backward(dy);
    d = n2.backward(d);
    d = c2.backward(d);
    d = r1.backward(d);
    d = n1.backward(d);
    return c1.backward(d);
  }
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    throw DimensionError("concat_channels: spatial shape mismatch");
  Tensor y(a.n, a.h, a.w, a.c + b.c);
  const std::size_t npix = a.npix();
  for (std::size_t p = 0; p < npix; ++p) {
    std::copy_n(a.v.data() + p * a.c, a.c, y.v.data() + p * y.c);
    std::copy_n(b.v.data() + p * b.c, b.c, y.v.data() + p * y.c + a.c);
  }
  return y;
}

inline void split_channels(const Tensor& dy, Tensor& da, Tensor& db) {
  const std::size_t npix = dy.npix();
  for (std::size_t p = 0; p < npix; ++p) {
    std::copy_n(dy.v.data() + p * dy.c, da.c, da.v.data() + p * da.c);
    std::copy_n(dy.v.data() + p * dy.c + da.c, db.c, db.v.data() + p * db.c);
  }
}

}  // namespace detail

// U-Net-style encoder/decoder. Parameters live in one flat vector so EMA,
// Adam, and checkpoints can treat the whole model as a single array; layers
// hold raw pointers into it.
class Network {
 public:
  explicit Network(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    build();
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = delete;
  Network& operator=(Network&&) = delete;

  const NetworkConfig& config() const { return cfg_; }
  std::size_t param_count() const { return params_.size(); }
  const std::vector<ParamSpan>& spans() const { return spans_; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& grads() { return grads_; }
  void zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

  void set_params(const std::vector<double>& p) {
    if (p.size() != params_.size()) throw DimensionError("set_params: size mismatch");
    params_ = p;
  }

  // batch-norm running statistics; empty under group norm
  std::vector<double> buffers() const {
    std::vector<double> out;
    for (const auto* nl : norm_layers_) {
      out.insert(out.end(), nl->run_mean.begin(), nl->run_mean.end());
      out.insert(out.end(), nl->run_var.begin(), nl->run_var.end());
    }
    return out;
  }

  void set_buffers(const std::vector<double>& b) {
    std::size_t k = 0;
    for (auto* nl : norm_layers_) {
      for (double& v : nl->run_mean) v = b.at(k++);
      for (double& v : nl->run_var) v = b.at(k++);
    }
    if (k != b.size()) throw DimensionError("set_buffers: size mismatch");
  }

  Tensor forward(const Tensor& x, bool training = true) {
    if (x.c != cfg_.in_channels) throw DimensionError("forward: input channel mismatch");
    if (!x.finite()) throw InputError("forward: non-finite input");
    const int div = 1 << cfg_.depth;
    if (x.h % div != 0 || x.w % div != 0)
      throw DimensionError("forward: image size must be divisible by 2^depth");
    Tensor cur = x;
    skips_.resize(cfg_.depth);
    for (int i = 0; i < cfg_.depth; ++i) {
      skips_[i] = enc_[i].forward(cur, training);
      cur = pools_[i].forward(skips_[i]);
    }
    cur = bott_.forward(cur, training);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      Tensor up = ups_[i].forward(cur);
      Tensor cat = detail::concat_channels(up, skips_[i]);
      cur = dec_[i].forward(cat, training);
    }
    return final_.forward(cur);
  }

  // accumulates parameter gradients; returns gradient w.r.t. the input
  Tensor backward(const Tensor& dlogits) {
    Tensor dcur = final_.backward(dlogits);
    std::vector<Tensor> dskip(cfg_.depth);
    for (int i = 0; i < cfg_.depth; ++i) {
      Tensor dcat = dec_[i].backward(dcur);
      const int up_c = up_channels(i);
      Tensor dup(dcat.n, dcat.h, dcat.w, up_c);
      dskip[i] = Tensor(dcat.n, dcat.h, dcat.w, dcat.c - up_c);
      detail::split_channels(dcat, dup, dskip[i]);
      dcur = ups_[i].backward(dup);
    }
    dcur = bott_.backward(dcur);
    for (int i = cfg_.depth - 1; i >= 0; --i) {
      Tensor d = pools_[i].backward(dcur);
      for (std::size_t k = 0; k < d.size(); ++k) d.v[k] += dskip[i].v[k];
      dcur = enc_[i].backward(d);
    }
    return dcur;
  }

  // copy non-trainable state (running stats) from a peer network, e.g. when
  // refreshing an EMA teacher whose parameters are averaged separately
  void copy_buffers_from(const Network& other) { set_buffers(other.buffers()); }

 private:
  int enc_out(int level) const { return cfg_.base_channels << level; }
  int up_channels(int level) const {
    return level == cfg_.depth - 1 ? cfg_.base_channels << cfg_.depth : enc_out(level + 1);
  }

  void setup_conv(detail::Conv2d& conv, const std::string& name, int cin, int cout, int k,
                  std::size_t& cursor) {
    conv.cin = cin;
    conv.cout = cout;
    conv.k = k;
    spans_.push_back({name + ".w", cursor, conv.weight_count()});
    cursor += conv.weight_count();
    spans_.push_back({name + ".b", cursor, conv.bias_count()});
    cursor += conv.bias_count();
  }

  void setup_norm(detail::NormLayer& nl, const std::string& name, int c, std::size_t& cursor) {
    nl.kind = cfg_.norm;
    nl.c = c;
    nl.groups = std::gcd(c, 4);
    nl.init_buffers();
    spans_.push_back({name + ".gamma", cursor, static_cast<std::size_t>(c)});
    cursor += c;
    spans_.push_back({name + ".beta", cursor, static_cast<std::size_t>(c)});
    cursor += c;
    norm_layers_.push_back(&nl);
  }

  void setup_block(detail::ConvBlock& blk, const std::string& name, int cin, int cout,
                   std::size_t& cursor) {
    setup_conv(blk.c1, name + ".conv1", cin, cout, 3, cursor);
    setup_norm(blk.n1, name + ".norm1", cout, cursor);
    setup_conv(blk.c2, name + ".conv2", cout, cout, 3, cursor);
    setup_norm(blk.n2, name + ".norm2", cout, cursor);
  }

  void bind_conv(detail::Conv2d& conv, std::size_t& idx) {
    conv.w = params_.data() + spans_[idx].offset;
    conv.gw = grads_.data() + spans_[idx].offset;
    ++idx;
    conv.b = params_.data() + spans_[idx].offset;
    conv.gb = grads_.data() + spans_[idx].offset;
    ++idx;
  }

  void bind_norm(detail::NormLayer& nl, std::size_t& idx) {
    nl.gamma = params_.data() + spans_[idx].offset;
    nl.ggamma = grads_.data() + spans_[idx].offset;
    ++idx;
    nl.beta = params_.data() + spans_[idx].offset;
    nl.gbeta = grads_.data() + spans_[idx].offset;
    ++idx;
  }

  void bind_block(detail::ConvBlock& blk, std::size_t& idx) {
    bind_conv(blk.c1, idx);
    bind_norm(blk.n1, idx);
    bind_conv(blk.c2, idx);
    bind_norm(blk.n2, idx);
  }

  void build() {
    enc_.resize(cfg_.depth);
    dec_.resize(cfg_.depth);
    pools_.resize(cfg_.depth);
    ups_.resize(cfg_.depth);

    std::size_t cursor = 0;
    for (int i = 0; i < cfg_.depth; ++i)
      setup_block(enc_[i], "enc" + std::to_string(i), i == 0 ? cfg_.in_channels : enc_out(i - 1),
                  enc_out(i), cursor);
    setup_block(bott_, "bottleneck", enc_out(cfg_.depth - 1), cfg_.base_channels << cfg_.depth,
                cursor);
    for (int i = cfg_.depth - 1; i >= 0; --i)
      setup_block(dec_[i], "dec" + std::to_string(i), up_channels(i) + enc_out(i), enc_out(i),
                  cursor);
    setup_conv(final_, "final", cfg_.base_channels, cfg_.num_classes, 1, cursor);

    params_.assign(cursor, 0.0);
    grads_.assign(cursor, 0.0);

    std::size_t idx = 0;
    for (int i = 0; i < cfg_.depth; ++i) bind_block(enc_[i], idx);
    bind_block(bott_, idx);
    for (int i = cfg_.depth - 1; i >= 0; --i) bind_block(dec_[i], idx);
    bind_conv(final_, idx);

    init_params();
  }

  void init_params() {
    Rng rng(cfg_.seed, "init");
    for (const ParamSpan& s : spans_) {
      double* p = params_.data() + s.offset;
      if (s.name.size() >= 2 && s.name.compare(s.name.size() - 2, 2, ".w") == 0) {
        // He initialization: fan_in = k*k*cin, recovered from the span layout
        const detail::Conv2d* conv = conv_by_name(s.name.substr(0, s.name.size() - 2));
        const double fan_in = static_cast<double>(conv->k) * conv->k * conv->cin;
        const double std_dev = std::sqrt(2.0 / fan_in);
        for (std::size_t i = 0; i < s.count; ++i) p[i] = rng.normal(0.0, std_dev);
      } else if (s.name.find(".gamma") != std::string::npos) {
        std::fill_n(p, s.count, 1.0);
      } else {
        std::fill_n(p, s.count, 0.0);  // biases and betas
      }
    }
  }

  const detail::Conv2d* conv_by_name(const std::string& prefix) const {
    auto match = [&](const detail::ConvBlock& b, const std::string& base,
                     const detail::Conv2d*& out) {
      if (prefix == base + ".conv1") out = &b.c1;
      if (prefix == base + ".conv2") out = &b.c2;
    };
    const detail::Conv2d* out = nullptr;
    for (int i = 0; i < cfg_.depth; ++i) match(enc_[i], "enc" + std::to_string(i), out);
    match(bott_, "bottleneck", out);
    for (int i = 0; i < cfg_.depth; ++i) match(dec_[i], "dec" + std::to_string(i), out);
    if (prefix == "final") out = &final_;
    if (!out) throw StateError("unknown conv span: " + prefix);
    return out;
  }

  NetworkConfig cfg_;
  std::vector<detail::ConvBlock> enc_, dec_;
  detail::ConvBlock bott_;
  detail::Conv2d final_;
  std::vector<detail::MaxPool2> pools_;
  std::vector<detail::Upsample2> ups_;
  std::vector<detail::NormLayer*> norm_layers_;
  std::vector<Tensor> skips_;
  std::vector<double> params_, grads_;
  std::vector<ParamSpan> spans_;
};

// Numerically stable per-pixel softmax over the channel axis.
inline Tensor softmax(const Tensor& logits) {
  if (!logits.finite()) throw InputError("softmax: non-finite logits");
  Tensor out(logits.n, logits.h, logits.w, logits.c);
  const std::size_t npix = logits.npix();
  for (std::size_t p = 0; p < npix; ++p) {
    const double* z = logits.v.data() + p * logits.c;
    double* o = out.v.data() + p * logits.c;
    double mx = z[0];
    for (int k = 1; k < logits.c; ++k) mx = std::max(mx, z[k]);
    double sum = 0.0;
    for (int k = 0; k < logits.c; ++k) {
      o[k] = std::exp(z[k] - mx);
      sum += o[k];
    }
    for (int k = 0; k < logits.c; ++k) o[k] /= sum;
  }
  return out;
}

// dL/dlogits from dL/dprobs: dz_k = p_k (dp_k - sum_j dp_j p_j)
inline Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs) {
  if (!probs.same_shape(dprobs)) throw DimensionError("softmax_backward: shape mismatch");
  Tensor dz(probs.n, probs.h, probs.w, probs.c);
  const std::size_t npix = probs.npix();
  for (std::size_t p = 0; p < npix; ++p) {
    const double* pp = probs.v.data() + p * probs.c;
    const double* dp = dprobs.v.data() + p * probs.c;
    double* o = dz.v.data() + p * probs.c;
    double dot = 0.0;
    for (int k = 0; k < probs.c; ++k) dot += dp[k] * pp[k];
    for (int k = 0; k < probs.c; ++k) o[k] = pp[k] * (dp[k] - dot);
  }
  return dz;
}

// i.i.d. Gaussian input noise (the xi / xi' perturbations); clamped to [0,1]
inline Image perturb(const Image& image, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ConfigError("perturb: sigma must be >= 0");
  if (sigma == 0.0) return image;
  Image out = image;
  for (double& px : out.pix) px = std::clamp(px + rng.normal(0.0, sigma), 0.0, 1.0);
  return out;
}

inline LabelMap argmax_labels(const ProbMap& prob) {
  LabelMap lm{prob.h, prob.w, std::vector<std::uint8_t>(prob.npix())};
  for (std::size_t i = 0; i < prob.npix(); ++i) {
    const double* p = prob.p.data() + i * prob.c;
    int best = 0;
    for (int k = 1; k < prob.c; ++k)
      if (p[k] > p[best]) best = k;
    lm.lab[i] = static_cast<std::uint8_t>(best);
  }
  return lm;
}

}  // namespace dualteacher
