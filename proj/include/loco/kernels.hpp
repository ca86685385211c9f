#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "loco/error.hpp"
#include "loco/tensor.hpp"

namespace loco {

using Hw = std::array<std::size_t, 2>;

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Hw kernel{1, 1};
  Hw stride{1, 1};
  Hw padding{0, 0};
  std::size_t groups = 1;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw ConfigError("conv: channel counts must be positive");
    if (groups == 0) throw ConfigError("conv: groups must be positive");
    if (in_channels % groups || out_channels % groups) {
      throw ConfigError("conv: in_channels " + std::to_string(in_channels) + " and out_channels " +
                        std::to_string(out_channels) + " must be divisible by groups " + std::to_string(groups));
    }
    if (!kernel[0] || !kernel[1] || !stride[0] || !stride[1]) {
      throw ConfigError("conv: kernel and stride must be positive");
    }
  }

  Hw output_hw(Hw in) const {
    Hw out{};
    for (int d = 0; d < 2; ++d) {
      if (in[d] + 2 * padding[d] < kernel[d]) {
        throw ShapeError("conv: input extent " + std::to_string(in[d]) + " smaller than kernel");
      }
      out[d] = (in[d] + 2 * padding[d] - kernel[d]) / stride[d] + 1;
    }
    return out;
  }

  Shape weight_shape() const { return {out_channels, in_channels / groups, kernel[0], kernel[1]}; }
  std::size_t fan_in() const { return in_channels / groups * kernel[0] * kernel[1]; }
};

struct PoolSpec {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t padding = 1;

  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;

  Hw output_hw(Hw in) const {
    Hw out{};
    for (int d = 0; d < 2; ++d) {
      if (in[d] + 2 * padding < kernel) throw ShapeError("pool: input smaller than window");
      out[d] = (in[d] + 2 * padding - kernel) / stride + 1;
    }
    return out;
  }
};

namespace kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

inline Shape conv_output_shape(const Shape& x, const Shape& w, const ConvSpec& spec) {
  require_rank(x, 4, "conv2d input");
  spec.validate();
  if (x[1] != spec.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(x[1]) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  if (w != spec.weight_shape()) {
    throw ShapeError("conv2d: weight shape " + shape_str(w) + ", expected " + shape_str(spec.weight_shape()));
  }
  Hw o = spec.output_hw({x[2], x[3]});
  return {x[0], spec.out_channels, o[0], o[1]};
}

/// Valid output range [lo, hi) along one axis for kernel offset k: the
/// outputs whose input coordinate o*stride + k - pad lies inside [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::size_t out, std::size_t stride,
                                                       std::size_t k, std::size_t pad) {
  const std::size_t lo = pad > k ? (pad - k + stride - 1) / stride : 0;
  if (n + pad <= k) return {0, 0};
  const std::size_t hi = std::min(out, (n - 1 + pad - k) / stride + 1);
  return {std::min(lo, hi), hi};
}

/// Lays out the receptive fields of one sample's channel group as a
/// (cin_g*kh*kw) x (ho*wo) block of a matrix with row stride `ld`.
template <typename T>
void im2col(const T* x, std::size_t cin_g, std::size_t h, std::size_t w, const ConvSpec& s, std::size_t ho,
            std::size_t wo, T* col, std::size_t ld) {
  const std::size_t kh = s.kernel[0], kw = s.kernel[1], sy = s.stride[0], sx = s.stride[1];
  for (std::size_t c = 0; c < cin_g; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      const auto [ylo, yhi] = valid_range(h, ho, sy, ky, s.padding[0]);
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const auto [xlo, xhi] = valid_range(w, wo, sx, kx, s.padding[1]);
        T* row = col + ((c * kh + ky) * kw + kx) * ld;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          T* dst = row + oy * wo;
          if (oy < ylo || oy >= yhi || xlo >= xhi) {
            std::fill(dst, dst + wo, T{0});
            continue;
          }
          const T* src = x + (c * h + oy * sy + ky - s.padding[0]) * w + kx - s.padding[1];
          std::fill(dst, dst + xlo, T{0});
          if (sx == 1) {
            std::copy(src + xlo, src + xhi, dst + xlo);
          } else {
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = src[ox * sx];
          }
          std::fill(dst + xhi, dst + wo, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t cin_g, std::size_t h, std::size_t w, const ConvSpec& s, std::size_t ho,
                std::size_t wo, T* dx, std::size_t ld) {
  const std::size_t kh = s.kernel[0], kw = s.kernel[1], sy = s.stride[0], sx = s.stride[1];
  for (std::size_t c = 0; c < cin_g; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      const auto [ylo, yhi] = valid_range(h, ho, sy, ky, s.padding[0]);
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const auto [xlo, xhi] = valid_range(w, wo, sx, kx, s.padding[1]);
        const T* row = col + ((c * kh + ky) * kw + kx) * ld;
        for (std::size_t oy = ylo; oy < yhi; ++oy) {
          T* dst = dx + (c * h + oy * sy + ky - s.padding[0]) * w + kx - s.padding[1];
          const T* src = row + oy * wo;
          for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox * sx] += src[ox];
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvSpec& s) {
  return s.kernel == Hw{1, 1} && s.stride == Hw{1, 1} && s.padding == Hw{0, 0};
}

template <typename T>
struct ConvScratch {
  std::vector<T> col, dcol, buf;
};

/// Samples per GEMM: the column matrix of a chunk stays under ~4M elements.
inline std::size_t conv_chunk(std::size_t n, std::size_t k, std::size_t p) {
  return std::clamp<std::size_t>((std::size_t{1} << 22) / std::max<std::size_t>(k * p, 1), 1, n);
}

/// Grouped 2-d cross-correlation, NCHW input, weight (out, in/groups, kh, kw).
/// Each group runs one GEMM per chunk of samples.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s, Tensor<T>& out,
                    ConvScratch<T>& sc) {
  const Shape os = conv_output_shape(x.shape(), w.shape(), s);
  out.resize(os);
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3), ho = os[2], wo = os[3];
  const std::size_t g = s.groups, cin_g = s.in_channels / g, cout_g = s.out_channels / g;
  const std::size_t k = cin_g * s.kernel[0] * s.kernel[1], p = ho * wo;
  const std::size_t chunk = conv_chunk(n, k, p);
  sc.col.resize(k * chunk * p);
  sc.buf.resize(cout_g * chunk * p);
  for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, n - b0), ld = nb * p;
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t bi = 0; bi < nb; ++bi) {
        const T* xin = x.data() + ((b0 + bi) * s.in_channels + gi * cin_g) * h * wd;
        im2col(xin, cin_g, h, wd, s, ho, wo, sc.col.data() + bi * p, ld);
      }
      ConstMapMat<T> col(sc.col.data(), k, ld);
      ConstMapMat<T> wg(w.data() + gi * cout_g * k, cout_g, k);
      MapMat<T> y(sc.buf.data(), cout_g, ld);
      y.noalias() = wg * col;
      for (std::size_t bi = 0; bi < nb; ++bi)
        for (std::size_t o = 0; o < cout_g; ++o) {
          const T* src = sc.buf.data() + o * ld + bi * p;
          std::copy(src, src + p, out.data() + ((b0 + bi) * s.out_channels + gi * cout_g + o) * p);
        }
    }
  }
}

/// Accumulates into `dx` / `dw` when non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s, const Tensor<T>& gout, Tensor<T>* dx,
                     Tensor<T>* dw, ConvScratch<T>& sc) {
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3), ho = gout.dim(2), wo = gout.dim(3);
  const std::size_t g = s.groups, cin_g = s.in_channels / g, cout_g = s.out_channels / g;
  const std::size_t k = cin_g * s.kernel[0] * s.kernel[1], p = ho * wo;
  const std::size_t chunk = conv_chunk(n, k, p);
  sc.col.resize(k * chunk * p);
  sc.dcol.resize(k * chunk * p);
  sc.buf.resize(cout_g * chunk * p);
  for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
    const std::size_t nb = std::min(chunk, n - b0), ld = nb * p;
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t bi = 0; bi < nb; ++bi)
        for (std::size_t o = 0; o < cout_g; ++o) {
          const T* src = gout.data() + ((b0 + bi) * s.out_channels + gi * cout_g + o) * p;
          std::copy(src, src + p, sc.buf.data() + o * ld + bi * p);
        }
      ConstMapMat<T> go(sc.buf.data(), cout_g, ld);
      if (dw) {
        for (std::size_t bi = 0; bi < nb; ++bi) {
          const T* xin = x.data() + ((b0 + bi) * s.in_channels + gi * cin_g) * h * wd;
          im2col(xin, cin_g, h, wd, s, ho, wo, sc.col.data() + bi * p, ld);
        }
        ConstMapMat<T> col(sc.col.data(), k, ld);
        MapMat<T> dwg(dw->data() + gi * cout_g * k, cout_g, k);
        dwg.noalias() += go * col.transpose();
      }
      if (dx) {
        ConstMapMat<T> wg(w.data() + gi * cout_g * k, cout_g, k);
        MapMat<T> dc(sc.dcol.data(), k, ld);
        dc.noalias() = wg.transpose() * go;
        for (std::size_t bi = 0; bi < nb; ++bi) {
          T* dxo = dx->data() + ((b0 + bi) * s.in_channels + gi * cin_g) * h * wd;
          col2im_add(sc.dcol.data() + bi * p, cin_g, h, wd, s, ho, wo, dxo, ld);
        }
      }
    }
  }
}

/// Per-channel layout helper: (outer, channels, inner) view of NC or NCHW.
struct ChannelLayout {
  std::size_t outer = 0, channels = 0, inner = 0;
  static ChannelLayout of(const Shape& s) {
    if (s.size() == 2) return {s[0], s[1], 1};
    if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
    throw ShapeError("batch_norm: expected NC or NCHW, got " + shape_str(s));
  }
  std::size_t count() const { return outer * inner; }
};

template <typename T>
struct BatchNormCache {
  std::vector<T> mean, inv_std;
  Tensor<T> xhat;
};

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates the running stats; eval mode applies the running stats.
/// Returns true when a train-mode batch of one sample had zero variance.
template <typename T>
bool batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, bool training, T eps,
                        T momentum, Tensor<T>& running_mean, Tensor<T>& running_var, Tensor<T>& out,
                        BatchNormCache<T>& cache) {
  const ChannelLayout L = ChannelLayout::of(x.shape());
  if (gamma.size() != L.channels || beta.size() != L.channels || running_mean.size() != L.channels ||
      running_var.size() != L.channels) {
    throw ShapeError("batch_norm: parameter length does not match " + std::to_string(L.channels) + " channels");
  }
  out.resize(x.shape());
  cache.mean.assign(L.channels, T{0});
  cache.inv_std.assign(L.channels, T{0});
  cache.xhat.resize(x.shape());
  bool degenerate = false;
  const std::size_t cnt = L.count();
  for (std::size_t c = 0; c < L.channels; ++c) {
    T mean, var;
    if (training) {
      double s = 0;
      for (std::size_t o = 0; o < L.outer; ++o) {
        const T* p = x.data() + (o * L.channels + c) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) s += p[i];
      }
      mean = static_cast<T>(s / static_cast<double>(cnt));
      double v = 0;
      for (std::size_t o = 0; o < L.outer; ++o) {
        const T* p = x.data() + (o * L.channels + c) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) {
          const double d = static_cast<double>(p[i]) - static_cast<double>(mean);
          v += d * d;
        }
      }
      var = static_cast<T>(v / static_cast<double>(cnt));
      if (L.outer == 1 && var == T{0}) degenerate = true;
      const T unbiased = cnt > 1 ? static_cast<T>(v / static_cast<double>(cnt - 1)) : var;
      running_mean[c] = (T{1} - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (T{1} - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv = T{1} / std::sqrt(var + eps);
    cache.mean[c] = mean;
    cache.inv_std[c] = inv;
    for (std::size_t o = 0; o < L.outer; ++o) {
      const std::size_t off = (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) {
        const T xh = (x[off + i] - mean) * inv;
        cache.xhat[off + i] = xh;
        out[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  return degenerate;
}

template <typename T>
void batch_norm_backward(const Tensor<T>& gamma, const Tensor<T>& gout, const BatchNormCache<T>& cache, bool training,
                         Tensor<T>* dx, Tensor<T>* dgamma, Tensor<T>* dbeta) {
  const ChannelLayout L = ChannelLayout::of(gout.shape());
  const T cnt = static_cast<T>(L.count());
  for (std::size_t c = 0; c < L.channels; ++c) {
    T sum_g{0}, sum_gx{0};
    for (std::size_t o = 0; o < L.outer; ++o) {
      const std::size_t off = (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) {
        sum_g += gout[off + i];
        sum_gx += gout[off + i] * cache.xhat[off + i];
      }
    }
    if (dgamma) (*dgamma)[c] += sum_gx;
    if (dbeta) (*dbeta)[c] += sum_g;
    if (!dx) continue;
    const T k = gamma[c] * cache.inv_std[c];
    const T mg = sum_g / cnt, mgx = sum_gx / cnt;
    for (std::size_t o = 0; o < L.outer; ++o) {
      const std::size_t off = (o * L.channels + c) * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) {
        (*dx)[off + i] += training ? k * (gout[off + i] - mg - cache.xhat[off + i] * mgx) : k * gout[off + i];
      }
    }
  }
}

/// Max pooling with implicit -inf padding. `argmax` receives flat input
/// offsets of the winners (first maximum wins on ties).
template <typename T>
void max_pool_forward(const Tensor<T>& x, const PoolSpec& s, Tensor<T>& out, std::vector<std::size_t>& argmax) {
  require_rank(x.shape(), 4, "max_pool");
  const Hw o = s.output_hw({x.dim(2), x.dim(3)});
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  out.resize({n, c, o[0], o[1]});
  argmax.resize(out.size());
  std::size_t idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < o[0]; ++oy) {
      for (std::size_t ox = 0; ox < o[1]; ++ox, ++idx) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t arg = base;
        for (std::size_t ky = 0; ky < s.kernel; ++ky) {
          const long iy = static_cast<long>(oy * s.stride + ky) - static_cast<long>(s.padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < s.kernel; ++kx) {
            const long ix = static_cast<long>(ox * s.stride + kx) - static_cast<long>(s.padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t off = base + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (x[off] > best) {
              best = x[off];
              arg = off;
            }
          }
        }
        out[idx] = best;
        argmax[idx] = arg;
      }
    }
  }
}

/// Source taps of a half-pixel-centre linear resampling along one axis.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;

  static LinearTaps make(std::size_t in, std::size_t out) {
    LinearTaps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.w_hi.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto l = static_cast<std::size_t>(std::floor(src));
      t.lo[i] = l;
      t.hi[i] = std::min(l + 1, in - 1);
      t.w_hi[i] = src - static_cast<double>(l);
    }
    return t;
  }
};

/// Separable bilinear resize of an NCHW tensor (align-corners off).
template <typename T>
void bilinear_forward(const Tensor<T>& x, Hw out_hw, Tensor<T>& out) {
  require_rank(x.shape(), 4, "bilinear_resize");
  if (!out_hw[0] || !out_hw[1]) throw ShapeError("bilinear_resize: output size must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  out.resize({n, c, out_hw[0], out_hw[1]});
  if (h == out_hw[0] && w == out_hw[1]) {
    out = x;
    return;
  }
  const LinearTaps ty = LinearTaps::make(h, out_hw[0]), tx = LinearTaps::make(w, out_hw[1]);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data() + plane * h * w;
    T* dst = out.data() + plane * out_hw[0] * out_hw[1];
    for (std::size_t oy = 0; oy < out_hw[0]; ++oy) {
      const T wy = static_cast<T>(ty.w_hi[oy]);
      const T* r0 = src + ty.lo[oy] * w;
      const T* r1 = src + ty.hi[oy] * w;
      for (std::size_t ox = 0; ox < out_hw[1]; ++ox) {
        const T wx = static_cast<T>(tx.w_hi[ox]);
        const T top = r0[tx.lo[ox]] * (T{1} - wx) + r0[tx.hi[ox]] * wx;
        const T bot = r1[tx.lo[ox]] * (T{1} - wx) + r1[tx.hi[ox]] * wx;
        dst[oy * out_hw[1] + ox] = top * (T{1} - wy) + bot * wy;
      }
    }
  }
}

template <typename T>
void bilinear_backward(const Shape& in_shape, const Tensor<T>& gout, Tensor<T>& dx) {
  const std::size_t n = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
  const std::size_t oh = gout.dim(2), ow = gout.dim(3);
  if (h == oh && w == ow) {
    dx += gout;
    return;
  }
  const LinearTaps ty = LinearTaps::make(h, oh), tx = LinearTaps::make(w, ow);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T* d = dx.data() + plane * h * w;
    const T* g = gout.data() + plane * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const T wy = static_cast<T>(ty.w_hi[oy]);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T wx = static_cast<T>(tx.w_hi[ox]);
        const T v = g[oy * ow + ox];
        d[ty.lo[oy] * w + tx.lo[ox]] += v * (T{1} - wy) * (T{1} - wx);
        d[ty.lo[oy] * w + tx.hi[ox]] += v * (T{1} - wy) * wx;
        d[ty.hi[oy] * w + tx.lo[ox]] += v * wy * (T{1} - wx);
        d[ty.hi[oy] * w + tx.hi[ox]] += v * wy * wx;
      }
    }
  }
}

}  // namespace kernels

// Standalone tensor functions -------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weights) {
  Tensor<T> out;
  kernels::ConvScratch<T> scratch;
  kernels::conv2d_forward(x, weights, spec, out, scratch);
  return out;
}

enum class NormMode { train, eval };

template <typename T>
struct RunningStats {
  Tensor<T> mean;
  Tensor<T> var;
  explicit RunningStats(std::size_t channels) : mean(Shape{channels}, T{0}), var(Shape{channels}, T{1}) {}
};

template <typename T>
struct BatchNormResult {
  Tensor<T> output;
  bool degenerate = false;
};

template <typename T>
BatchNormResult<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, NormMode mode,
                              T eps, RunningStats<T>& stats, T momentum = T(0.1)) {
  BatchNormResult<T> r;
  kernels::BatchNormCache<T> cache;
  r.degenerate = kernels::batch_norm_forward(x, gamma, beta, mode == NormMode::train, eps, momentum, stats.mean,
                                             stats.var, r.output, cache);
  return r;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, Hw out) {
  Tensor<T> y;
  kernels::bilinear_forward(x, out, y);
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  kernels::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    T s{0};
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    out[i] = s / static_cast<T>(hw);
  }
  return out;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, const PoolSpec& spec) {
  Tensor<T> out;
  std::vector<std::size_t> arg;
  kernels::max_pool_forward(x, spec, out, arg);
  return out;
}

}  // namespace loco
