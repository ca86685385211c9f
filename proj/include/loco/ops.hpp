#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "loco/graph.hpp"
#include "loco/kernels.hpp"

namespace loco::ops {

namespace detail {

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

inline void require_same(std::span<const Shape> in, const char* what) {
  if (in[0] != in[1]) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(in[0]) + " vs " + shape_str(in[1]));
  }
}

template <typename T>
class AddOp final : public Op<T> {
 public:
  std::string_view name() const override { return "add"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    require_same(in, "add");
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] + (*in[1])[i];
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    if (gin[0]) *gin[0] += g;
    if (gin[1]) *gin[1] += g;
  }
};

template <typename T>
class SubOp final : public Op<T> {
 public:
  std::string_view name() const override { return "sub"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    require_same(in, "sub");
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] - (*in[1])[i];
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    if (gin[0]) *gin[0] += g;
    if (gin[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
    }
  }
};

template <typename T>
class MulOp final : public Op<T> {
 public:
  std::string_view name() const override { return "mul"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    require_same(in, "mul");
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    if (gin[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * (*in[1])[i];
    }
    if (gin[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * (*in[0])[i];
    }
  }
};

template <typename T>
class ScaleOp final : public Op<T> {
 public:
  explicit ScaleOp(T s) : s_(s) {}
  std::string_view name() const override { return "scale"; }
  Shape infer_shape(std::span<const Shape> in) const override { return in[0]; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s_ * (*in[0])[i];
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += s_ * g[i];
  }

 private:
  T s_;
};

template <typename T>
class SumOp final : public Op<T> {
 public:
  explicit SumOp(bool mean) : mean_(mean) {}
  std::string_view name() const override { return mean_ ? "mean" : "sum"; }
  Shape infer_shape(std::span<const Shape>) const override { return {}; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize({});
    T s = in[0]->sum();
    out[0] = mean_ ? s / static_cast<T>(in[0]->size()) : s;
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    const T v = mean_ ? g[0] / static_cast<T>(in[0]->size()) : g[0];
    for (std::size_t i = 0; i < gin[0]->size(); ++i) (*gin[0])[i] += v;
  }

 private:
  bool mean_;
};

/// Sum of squared differences, a scalar.
template <typename T>
class SquaredDistanceOp final : public Op<T> {
 public:
  std::string_view name() const override { return "squared_distance"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    require_same(in, "squared_distance");
    return {};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize({});
    T s{0};
    for (std::size_t i = 0; i < in[0]->size(); ++i) {
      const T d = (*in[0])[i] - (*in[1])[i];
      s += d * d;
    }
    out[0] = s;
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    for (std::size_t i = 0; i < in[0]->size(); ++i) {
      const T d = T{2} * g[0] * ((*in[0])[i] - (*in[1])[i]);
      if (gin[0]) (*gin[0])[i] += d;
      if (gin[1]) (*gin[1])[i] -= d;
    }
  }
};

template <typename T>
class ReluOp final : public Op<T> {
 public:
  std::string_view name() const override { return "relu"; }
  Shape infer_shape(std::span<const Shape> in) const override { return in[0]; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out.resize(in[0]->shape());
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T v = (*in[0])[i];
      const bool on = v > T{0};
      out[i] = on ? v : T{0};
      h = mix(h, on ? i : 0);
    }
    sig_ = h;
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*in[0])[i] > T{0}) (*gin[0])[i] += g[i];
    }
  }
  std::uint64_t kink_signature() const override { return sig_; }

 private:
  std::uint64_t sig_ = 0;
};

template <typename T>
class Conv2dOp final : public Op<T> {
 public:
  explicit Conv2dOp(ConvSpec spec) : spec_(spec) { spec_.validate(); }
  std::string_view name() const override { return "conv2d"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    return kernels::conv_output_shape(in[0], in[1], spec_);
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    kernels::conv2d_forward(*in[0], *in[1], spec_, out, scratch());
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    kernels::conv2d_backward(*in[0], *in[1], spec_, g, gin[0], gin[1], scratch());
  }

 private:
  static kernels::ConvScratch<T>& scratch() {
    thread_local kernels::ConvScratch<T> s;
    return s;
  }

  ConvSpec spec_;
};

template <typename T>
class BatchNormOp final : public Op<T> {
 public:
  BatchNormOp(Tensor<T>* running_mean, Tensor<T>* running_var, T eps, T momentum)
      : mean_(running_mean), var_(running_var), eps_(eps), momentum_(momentum) {}
  std::string_view name() const override { return "batch_norm"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    const auto L = kernels::ChannelLayout::of(in[0]);
    if (in[1] != Shape{L.channels} || in[2] != Shape{L.channels}) {
      throw ShapeError("batch_norm: gamma/beta must have " + std::to_string(L.channels) + " entries");
    }
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext& ctx) override {
    training_ = ctx.training;
    const bool degenerate = kernels::batch_norm_forward(*in[0], *in[1], *in[2], training_, eps_, momentum_, *mean_,
                                                        *var_, out, cache_);
    if (degenerate && ctx.warnings) {
      ctx.warnings->push_back("batch_norm: degenerate train-mode batch (one sample, zero variance)");
    }
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    kernels::batch_norm_backward(*in[1], g, cache_, training_, gin[0], gin[1], gin[2]);
  }

 private:
  Tensor<T>* mean_;
  Tensor<T>* var_;
  T eps_, momentum_;
  bool training_ = true;
  kernels::BatchNormCache<T> cache_;
};

template <typename T>
class MaxPoolOp final : public Op<T> {
 public:
  explicit MaxPoolOp(PoolSpec spec) : spec_(spec) {}
  std::string_view name() const override { return "max_pool"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    kernels::require_rank(in[0], 4, "max_pool");
    const Hw o = spec_.output_hw({in[0][2], in[0][3]});
    return {in[0][0], in[0][1], o[0], o[1]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    kernels::max_pool_forward(*in[0], spec_, out, argmax_);
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[argmax_[i]] += g[i];
  }
  std::uint64_t kink_signature() const override {
    std::uint64_t h = 0;
    for (std::size_t a : argmax_) h = mix(h, a);
    return h;
  }

 private:
  PoolSpec spec_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class BilinearOp final : public Op<T> {
 public:
  explicit BilinearOp(Hw out) : out_(out) {}
  std::string_view name() const override { return "bilinear_resize"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    kernels::require_rank(in[0], 4, "bilinear_resize");
    if (!out_[0] || !out_[1]) throw ShapeError("bilinear_resize: output size must be positive");
    return {in[0][0], in[0][1], out_[0], out_[1]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    kernels::bilinear_forward(*in[0], out_, out);
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    kernels::bilinear_backward(in[0]->shape(), g, *gin[0]);
  }

 private:
  Hw out_;
};

template <typename T>
class GlobalAvgPoolOp final : public Op<T> {
 public:
  std::string_view name() const override { return "global_avg_pool"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    kernels::require_rank(in[0], 4, "global_avg_pool");
    return {in[0][0], in[0][1]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out = global_avg_pool(*in[0]);
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    const std::size_t hw = in[0]->dim(2) * in[0]->dim(3);
    const T inv = T{1} / static_cast<T>(hw);
    for (std::size_t i = 0; i < g.size(); ++i) {
      T* d = gin[0]->data() + i * hw;
      for (std::size_t j = 0; j < hw; ++j) d[j] += g[i] * inv;
    }
  }
};

/// y = x W^T + b with x (N, in), W (out, in), b (out).
template <typename T>
class LinearOp final : public Op<T> {
 public:
  std::string_view name() const override { return "linear"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    kernels::require_rank(in[0], 2, "linear input");
    kernels::require_rank(in[1], 2, "linear weight");
    if (in[1][1] != in[0][1] || in[2] != Shape{in[1][0]}) {
      throw ShapeError("linear: x " + shape_str(in[0]) + ", W " + shape_str(in[1]) + ", b " + shape_str(in[2]));
    }
    return {in[0][0], in[1][0]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    const std::size_t n = in[0]->dim(0), k = in[0]->dim(1), m = in[1]->dim(0);
    out.resize({n, m});
    kernels::ConstMapMat<T> x(in[0]->data(), n, k), w(in[1]->data(), m, k);
    kernels::MapMat<T> y(out.data(), n, m);
    y.noalias() = x * w.transpose();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += (*in[2])[j];
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    const std::size_t n = in[0]->dim(0), k = in[0]->dim(1), m = in[1]->dim(0);
    kernels::ConstMapMat<T> x(in[0]->data(), n, k), w(in[1]->data(), m, k), gy(g.data(), n, m);
    if (gin[0]) {
      kernels::MapMat<T> dx(gin[0]->data(), n, k);
      dx.noalias() += gy * w;
    }
    if (gin[1]) {
      kernels::MapMat<T> dw(gin[1]->data(), m, k);
      dw.noalias() += gy.transpose() * x;
    }
    if (gin[2]) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gin[2])[j] += g[i * m + j];
    }
  }
};

/// Row-wise Euclidean normalization of an (N, D) tensor.
template <typename T>
class L2NormalizeOp final : public Op<T> {
 public:
  std::string_view name() const override { return "l2_normalize"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    kernels::require_rank(in[0], 2, "l2_normalize");
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    const std::size_t n = in[0]->dim(0), d = in[0]->dim(1);
    out.resize(in[0]->shape());
    norms_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* x = in[0]->data() + i * d;
      T s{0};
      for (std::size_t j = 0; j < d; ++j) s += x[j] * x[j];
      const T nrm = std::sqrt(s);
      if (!(nrm > T{0})) throw NumericError("l2_normalize: degenerate (zero) vector in row " + std::to_string(i));
      norms_[i] = nrm;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[j] / nrm;
    }
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    const std::size_t n = in[0]->dim(0), d = in[0]->dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < d; ++j) dot += out[i * d + j] * g[i * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        (*gin[0])[i * d + j] += (g[i * d + j] - out[i * d + j] * dot) / norms_[i];
      }
    }
  }

 private:
  std::vector<T> norms_;
};

}  // namespace detail

/// Tolerance on the unit-norm precondition of the contrastive loss.
inline constexpr double kUnitNormTolerance = 1e-5;

/// InfoNCE over 2N unit vectors paired by adjacency (rows 2i and 2i+1 are
/// two views of one source). Each anchor classifies its partner among the
/// other 2N-1 rows; the loss is the mean over all 2N anchors.
template <typename T>
class InfoNceOp final : public Op<T> {
 public:
  explicit InfoNceOp(T temperature) : tau_(temperature) {
    if (!(temperature > T{0})) throw ConfigError("info_nce: temperature must be positive");
  }
  std::string_view name() const override { return "info_nce"; }
  Shape infer_shape(std::span<const Shape> in) const override {
    kernels::require_rank(in[0], 2, "info_nce");
    if (in[0][0] < 4 || in[0][0] % 2) {
      throw ShapeError("info_nce: need an even number of at least 4 projections (N >= 2), got " +
                       std::to_string(in[0][0]));
    }
    return {};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    const Tensor<T>& z = *in[0];
    const std::size_t m = z.dim(0), d = z.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      T s{0};
      for (std::size_t j = 0; j < d; ++j) s += z[i * d + j] * z[i * d + j];
      if (std::abs(std::sqrt(static_cast<double>(s)) - 1.0) > kUnitNormTolerance) {
        throw NumericError("info_nce: row " + std::to_string(i) + " is not unit-norm");
      }
    }
    kernels::ConstMapMat<T> zm(z.data(), m, d);
    prob_.resize(m, m);
    prob_.noalias() = zm * zm.transpose();
    prob_ /= tau_;
    double total = 0;
    for (std::size_t i = 0; i < m; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < m; ++j)
        if (j != i) mx = std::max(mx, prob_(i, j));
      T se{0};
      for (std::size_t j = 0; j < m; ++j)
        if (j != i) se += std::exp(prob_(i, j) - mx);
      const T lse = mx + std::log(se);
      total += static_cast<double>(lse - prob_(i, i ^ 1));
      for (std::size_t j = 0; j < m; ++j) prob_(i, j) = j == i ? T{0} : std::exp(prob_(i, j) - lse);
    }
    out.resize({});
    out[0] = static_cast<T>(total / static_cast<double>(m));
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& g,
                std::span<Tensor<T>* const> gin) override {
    const Tensor<T>& z = *in[0];
    const std::size_t m = z.dim(0), d = z.dim(1);
    kernels::RowMat<T> gs = prob_;
    for (std::size_t i = 0; i < m; ++i) gs(i, i ^ 1) -= T{1};
    gs *= g[0] / (static_cast<T>(m) * tau_);
    kernels::RowMat<T> sym = gs + gs.transpose();
    kernels::ConstMapMat<T> zm(z.data(), m, d);
    kernels::MapMat<T> dz(gin[0]->data(), m, d);
    dz.noalias() += sym * zm;
  }

 private:
  T tau_;
  kernels::RowMat<T> prob_;
};

// Builders --------------------------------------------------------------------

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::AddOp<T>>(), {a, b}, tag);
}
template <typename T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::SubOp<T>>(), {a, b}, tag);
}
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::MulOp<T>>(), {a, b}, tag);
}
template <typename T>
NodeId scale(Graph<T>& g, NodeId a, T s, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::ScaleOp<T>>(s), {a}, tag);
}
template <typename T>
NodeId sum(Graph<T>& g, NodeId a, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::SumOp<T>>(false), {a}, tag);
}
template <typename T>
NodeId mean(Graph<T>& g, NodeId a, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::SumOp<T>>(true), {a}, tag);
}
template <typename T>
NodeId squared_distance(Graph<T>& g, NodeId a, NodeId b, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::SquaredDistanceOp<T>>(), {a, b}, tag);
}
template <typename T>
NodeId relu(Graph<T>& g, NodeId x, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::ReluOp<T>>(), {x}, tag);
}
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId w, const ConvSpec& spec, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::Conv2dOp<T>>(spec), {x, w}, tag);
}

/// Batch norm with running statistics kept as graph buffers
/// `<prefix>.running_mean` / `<prefix>.running_var`.
template <typename T>
NodeId batch_norm(Graph<T>& g, NodeId x, NodeId gamma, NodeId beta, const std::string& prefix, StageTag tag = {},
                  T eps = T(1e-5), T momentum = T(0.1)) {
  const std::size_t c = kernels::ChannelLayout::of(g.shape(x)).channels;
  Tensor<T>& m = g.buffer(prefix + ".running_mean", {c}, T{0});
  Tensor<T>& v = g.buffer(prefix + ".running_var", {c}, T{1});
  return g.apply(std::make_unique<detail::BatchNormOp<T>>(&m, &v, eps, momentum), {x, gamma, beta}, tag);
}
template <typename T>
NodeId max_pool(Graph<T>& g, NodeId x, const PoolSpec& spec, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::MaxPoolOp<T>>(spec), {x}, tag);
}
template <typename T>
NodeId bilinear_resize(Graph<T>& g, NodeId x, Hw out, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::BilinearOp<T>>(out), {x}, tag);
}
template <typename T>
NodeId global_avg_pool(Graph<T>& g, NodeId x, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::GlobalAvgPoolOp<T>>(), {x}, tag);
}
template <typename T>
NodeId linear(Graph<T>& g, NodeId x, NodeId w, NodeId b, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::LinearOp<T>>(), {x, w, b}, tag);
}
template <typename T>
NodeId l2_normalize(Graph<T>& g, NodeId x, StageTag tag = {}) {
  return g.apply(std::make_unique<detail::L2NormalizeOp<T>>(), {x}, tag);
}
template <typename T>
NodeId info_nce(Graph<T>& g, NodeId z, T temperature, StageTag tag = {}) {
  return g.apply(std::make_unique<InfoNceOp<T>>(temperature), {z}, tag);
}

}  // namespace loco::ops
