#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "loco/encoder.hpp"
#include "loco/json_util.hpp"

namespace loco {

// Augmentation ------------------------------------------------------------------

struct AugmentConfig {
  double crop_min = 0.2;
  double crop_max = 1.0;
  Hw output_hw{32, 32};
  double color_strength = 0.5;
  double blur_prob = 0.5;
  double flip_prob = 0.5;

  friend bool operator==(const AugmentConfig&, const AugmentConfig&) = default;

  void validate() const {
    if (!(crop_min > 0 && crop_min <= crop_max && crop_max <= 1)) {
      throw ConfigError("augment.crop_scale: need 0 < min <= max <= 1");
    }
    if (!output_hw[0] || !output_hw[1]) throw ConfigError("augment.output_hw: must be positive");
    if (!(color_strength >= 0)) throw ConfigError("augment.color_strength: must be >= 0");
    if (!(blur_prob >= 0 && blur_prob <= 1)) throw ConfigError("augment.blur_prob: must lie in [0, 1]");
    if (!(flip_prob >= 0 && flip_prob <= 1)) throw ConfigError("augment.flip_prob: must lie in [0, 1]");
  }
};

namespace detail {

template <typename T>
Tensor<T> crop_chw(const Tensor<T>& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  const std::size_t c = img.dim(0), iw = img.dim(2), ih = img.dim(1);
  Tensor<T> out({1, c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * ih + y0 + y) * iw + x0 + x];
  return out;
}

template <typename T>
Tensor<T> one_view(const Tensor<T>& img, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double area = static_cast<double>(h * w);

  // Random resized crop: area fraction in [crop_min, crop_max], aspect in [3/4, 4/3].
  std::size_t ch = h, cw = w, y0 = 0, x0 = 0;
  const double s = cfg.crop_min + (cfg.crop_max - cfg.crop_min) * u01(rng);
  const double log_r = std::log(3.0 / 4.0) + (std::log(4.0 / 3.0) - std::log(3.0 / 4.0)) * u01(rng);
  for (int attempt = 0; attempt < 10 && s < 1.0; ++attempt) {
    const double r = attempt == 0 ? std::exp(log_r) : std::exp(std::log(3.0 / 4.0) + std::log(16.0 / 9.0) * u01(rng));
    const auto th = static_cast<std::size_t>(std::lround(std::sqrt(s * area / r)));
    const auto tw = static_cast<std::size_t>(std::lround(std::sqrt(s * area * r)));
    if (th >= 1 && tw >= 1 && th <= h && tw <= w) {
      ch = th;
      cw = tw;
      break;
    }
  }
  if (ch < h) y0 = static_cast<std::size_t>(u01(rng) * static_cast<double>(h - ch + 1)) % (h - ch + 1);
  if (cw < w) x0 = static_cast<std::size_t>(u01(rng) * static_cast<double>(w - cw + 1)) % (w - cw + 1);
  Tensor<T> v = bilinear_resize(crop_chw(img, y0, x0, ch, cw), cfg.output_hw);
  const std::size_t oh = cfg.output_hw[0], ow = cfg.output_hw[1], plane = oh * ow;

  if (cfg.flip_prob > 0 && u01(rng) < cfg.flip_prob) {
    for (std::size_t p = 0; p < c * oh; ++p) std::reverse(v.data() + p * ow, v.data() + (p + 1) * ow);
  }

  if (cfg.color_strength > 0) {
    const double st = cfg.color_strength;
    std::vector<double> gain(c), bias(c);
    for (std::size_t k = 0; k < c; ++k) {
      gain[k] = 1.0 + 0.8 * st * (2 * u01(rng) - 1);
      bias[k] = 0.2 * st * (2 * u01(rng) - 1);
    }
    const bool mix = c > 1 && u01(rng) < 0.5;
    std::vector<double> m(c * c, 0.0);
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) m[a * c + b] = (a == b ? 1.0 : 0.0) + (mix ? 0.25 * st * (2 * u01(rng) - 1) : 0.0);
    std::vector<double> px(c);
    for (std::size_t i = 0; i < plane; ++i) {
      for (std::size_t k = 0; k < c; ++k) px[k] = static_cast<double>(v[k * plane + i]);
      for (std::size_t a = 0; a < c; ++a) {
        double acc = 0;
        for (std::size_t b = 0; b < c; ++b) acc += m[a * c + b] * px[b];
        v[a * plane + i] = static_cast<T>(gain[a] * acc + bias[a]);
      }
    }
  }

  if (cfg.blur_prob > 0 && u01(rng) < cfg.blur_prob) {
    // Separable [1 2 1]/4 kernel with clamped borders.
    Tensor<T> tmp = v;
    for (std::size_t k = 0; k < c; ++k) {
      T* src = v.data() + k * plane;
      T* mid = tmp.data() + k * plane;
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t xl = x ? x - 1 : 0, xr = std::min(x + 1, ow - 1);
          mid[y * ow + x] = (src[y * ow + xl] + 2 * src[y * ow + x] + src[y * ow + xr]) / T{4};
        }
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          const std::size_t yu = y ? y - 1 : 0, yd = std::min(y + 1, oh - 1);
          src[y * ow + x] = (mid[yu * ow + x] + 2 * mid[y * ow + x] + mid[yd * ow + x]) / T{4};
        }
    }
  }
  return v.reshaped({c, oh, ow});
}

}  // namespace detail

/// Two independently sampled views of a CHW image; deterministic in
/// (image, cfg, seed).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment(const Tensor<T>& image, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (image.rank() != 3) throw ShapeError("augment: expected a CHW image, got " + shape_str(image.shape()));
  if (cfg.crop_min * static_cast<double>(image.dim(1) * image.dim(2)) < 1.0) {
    throw ConfigError("augment: crop scale " + std::to_string(cfg.crop_min) + " is infeasible for a " +
                      std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)) + " image");
  }
  std::mt19937_64 rng(detail::splitmix64(seed));
  Tensor<T> a = detail::one_view(image, cfg, rng);
  Tensor<T> b = detail::one_view(image, cfg, rng);
  return {std::move(a), std::move(b)};
}

inline json augment_to_json(const AugmentConfig& a) {
  return {{"crop_scale", {a.crop_min, a.crop_max}},
          {"output_hw", {a.output_hw[0], a.output_hw[1]}},
          {"color_strength", a.color_strength},
          {"blur_prob", a.blur_prob},
          {"flip_prob", a.flip_prob}};
}

inline AugmentConfig augment_from_json(const json& j, AugmentConfig a = {}) {
  const std::string where = "augment";
  jsonu::reject_unknown(j, {"crop_scale", "output_hw", "color_strength", "blur_prob", "flip_prob"}, where);
  if (j.contains("crop_scale")) {
    const auto v = jsonu::get_or<std::vector<double>>(j, "crop_scale", {}, where);
    if (v.size() != 2) throw ConfigError("augment.crop_scale: expected [min, max]");
    a.crop_min = v[0];
    a.crop_max = v[1];
  }
  if (j.contains("output_hw")) a.output_hw = jsonu::pair_of(j.at("output_hw"), where + ".output_hw");
  a.color_strength = jsonu::get_or<double>(j, "color_strength", a.color_strength, where);
  a.blur_prob = jsonu::get_or<double>(j, "blur_prob", a.blur_prob, where);
  a.flip_prob = jsonu::get_or<double>(j, "flip_prob", a.flip_prob, where);
  a.validate();
  return a;
}

// Decoders --------------------------------------------------------------------------

enum class DecoderDepth { none, one_stage, full_network };

struct DecoderSpec {
  std::size_t conv_blocks = 1;
  bool downsample = true;
  std::size_t mlp_layers = 2;
  std::size_t projection_dim = 128;
  DecoderDepth depth = DecoderDepth::none;
  double temperature = 0.1;

  friend bool operator==(const DecoderSpec&, const DecoderSpec&) = default;

  void validate() const {
    if (mlp_layers < 2) throw ConfigError("decoder.mlp_layers: must be >= 2");
    if (projection_dim < 1) throw ConfigError("decoder.projection_dim: must be >= 1");
    if (!(temperature > 0)) throw ConfigError("decoder.temperature: must be > 0");
  }
};

inline const char* depth_name(DecoderDepth d) {
  switch (d) {
    case DecoderDepth::one_stage: return "one_stage";
    case DecoderDepth::full_network: return "full_network";
    default: return "none";
  }
}

inline json decoder_to_json(const DecoderSpec& d) {
  return {{"conv_blocks", d.conv_blocks},     {"downsample", d.downsample},
          {"mlp_layers", d.mlp_layers},       {"projection_dim", d.projection_dim},
          {"depth", depth_name(d.depth)},     {"temperature", d.temperature}};
}

inline DecoderSpec decoder_from_json(const json& j, DecoderSpec d = {}) {
  const std::string where = "decoder";
  jsonu::reject_unknown(j, {"conv_blocks", "downsample", "mlp_layers", "projection_dim", "depth", "temperature"}, where);
  d.conv_blocks = jsonu::get_or<std::size_t>(j, "conv_blocks", d.conv_blocks, where);
  d.downsample = jsonu::get_or<bool>(j, "downsample", d.downsample, where);
  d.mlp_layers = jsonu::get_or<std::size_t>(j, "mlp_layers", d.mlp_layers, where);
  d.projection_dim = jsonu::get_or<std::size_t>(j, "projection_dim", d.projection_dim, where);
  d.temperature = jsonu::get_or<double>(j, "temperature", d.temperature, where);
  const auto depth = jsonu::get_or<std::string>(j, "depth", depth_name(d.depth), where);
  if (depth == "none") d.depth = DecoderDepth::none;
  else if (depth == "one_stage") d.depth = DecoderDepth::one_stage;
  else if (depth == "full_network") d.depth = DecoderDepth::full_network;
  else throw ConfigError("decoder.depth: expected none, one_stage or full_network");
  d.validate();
  return d;
}

/// Per-block stride flags for a decoder's conv blocks. Blocks come in
/// groups (one group for an explicit count, one per following encoder stage
/// for the depth presets); the first block of each group downsamples when
/// the spec asks for it. `following_stage_blocks` lists the block counts of
/// the stages above the unit; presets fall back to the explicit count when
/// it is empty.
inline std::vector<bool> decoder_block_strides(const DecoderSpec& spec,
                                               const std::vector<std::size_t>& following_stage_blocks = {}) {
  std::vector<std::size_t> groups;
  if (spec.depth == DecoderDepth::none || following_stage_blocks.empty()) {
    if (spec.conv_blocks) groups.push_back(spec.conv_blocks);
  } else if (spec.depth == DecoderDepth::one_stage) {
    groups.push_back(following_stage_blocks.front());
  } else {
    groups = following_stage_blocks;
  }
  std::vector<bool> flags;
  for (std::size_t n : groups)
    for (std::size_t i = 0; i < n; ++i) flags.push_back(spec.downsample && i == 0);
  return flags;
}

/// Shapes flowing through a decoder's conv blocks.
struct DecoderPlan {
  std::vector<bool> strided;
  std::vector<Hw> block_out_hw;
  std::size_t channels = 0;
};

inline DecoderPlan plan_decoder(const DecoderSpec& spec, const std::vector<bool>& strided, std::size_t in_channels,
                                Hw in_hw) {
  spec.validate();
  DecoderPlan p;
  p.strided = strided;
  p.channels = in_channels;
  Hw hw = in_hw;
  for (std::size_t i = 0; i < strided.size(); ++i) {
    if (strided[i]) {
      if (hw[0] < 2 || hw[1] < 2) {
        throw ConfigError("decoder: cannot downsample a " + std::to_string(hw[0]) + "x" + std::to_string(hw[1]) +
                          " feature map (conv block " + std::to_string(i) + ")");
      }
      hw = presets::conv(in_channels, in_channels, 3, 2).output_hw(hw);
    }
    p.block_out_hw.push_back(hw);
  }
  return p;
}

struct DecoderNodes {
  NodeId input = 0;
  std::vector<NodeId> block_outputs;
  NodeId pooled = 0;
  NodeId projection = 0;  // pre-normalization
  NodeId z = 0;           // unit-norm
};

/// Appends [conv blocks] -> GAP -> MLP -> l2_normalize on `x`. Parameters are
/// named `<prefix>…` and carry no stage tag.
template <typename T>
DecoderNodes attach_decoder(Graph<T>& g, NodeId x, const DecoderSpec& spec, const std::vector<bool>& strided,
                            const std::string& prefix, std::uint64_t seed) {
  const Shape& s = g.shape(x);
  kernels::require_rank(s, 4, "decoder input");
  const std::size_t c = s[1];
  plan_decoder(spec, strided, c, {s[2], s[3]});
  ParamFactory<T> pf{&g, prefix, prefix, seed, StageTag{}};
  DecoderNodes d;
  d.input = x;
  NodeId y = x;
  Hw hw{s[2], s[3]};
  for (std::size_t i = 0; i < strided.size(); ++i) {
    const BlockSpec blk = presets::basic(c, c, strided[i] ? 2 : 1);
    const ResolvedBlock rb = resolve_block(blk, c, hw, prefix + "conv_block" + std::to_string(i));
    y = build_block(pf.sub("b" + std::to_string(i)), y, blk, rb);
    hw = rb.out_hw;
    d.block_outputs.push_back(y);
  }
  y = ops::global_avg_pool(g, y);
  d.pooled = y;
  for (std::size_t l = 0; l < spec.mlp_layers; ++l) {
    const bool last = l + 1 == spec.mlp_layers;
    const std::size_t out = last ? spec.projection_dim : c;
    const std::string n = "fc" + std::to_string(l);
    const NodeId w = pf.weight(n + ".w", {out, c}, c);
    const NodeId b = pf.filled(n + ".b", {out}, T{0});
    y = ops::linear(g, y, w, b);
    if (!last) y = ops::relu(g, y);
  }
  d.projection = y;
  d.z = ops::l2_normalize(g, y);
  return d;
}

/// Standalone decoder evaluator over NCHW feature maps.
template <typename T>
class Decoder {
 public:
  Decoder(DecoderSpec spec, std::size_t in_channels, Hw in_hw, std::uint64_t seed = 0,
          const std::vector<std::size_t>& following_stage_blocks = {})
      : spec_(spec), in_channels_(in_channels), in_hw_(in_hw), seed_(seed),
        strided_(decoder_block_strides(spec, following_stage_blocks)) {
    plan_ = plan_decoder(spec_, strided_, in_channels_, in_hw_);
    Built& b = graph_for(1);
    params_ = export_state(b.graph);
  }

  const DecoderSpec& spec() const { return spec_; }
  const DecoderPlan& plan() const { return plan_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
  }
  State<T>& state() { return params_; }

  /// Spatial size feeding the global pool.
  Hw pooled_input_hw() const { return plan_.block_out_hw.empty() ? in_hw_ : plan_.block_out_hw.back(); }

  /// Unit-norm projections, one row per input sample.
  Tensor<T> project(const Tensor<T>& features, bool training = false) {
    if (features.rank() != 4 || features.dim(1) != in_channels_ || features.dim(2) != in_hw_[0] ||
        features.dim(3) != in_hw_[1]) {
      throw ShapeError("decoder: expected [N, " + std::to_string(in_channels_) + ", " + std::to_string(in_hw_[0]) +
                       ", " + std::to_string(in_hw_[1]) + "], got " + shape_str(features.shape()));
    }
    Built& b = graph_for(features.dim(0));
    load_state(b.graph, params_);
    b.graph.set_training(training);
    b.graph.bind(b.nodes.input, features);
    b.graph.forward();
    return b.graph.value(b.nodes.z);
  }

 private:
  struct Built {
    Graph<T> graph;
    DecoderNodes nodes;
  };

  Built& graph_for(std::size_t batch) {
    auto it = built_.find(batch);
    if (it != built_.end()) return it->second;
    Built b;
    const NodeId in = b.graph.input("features", {batch, in_channels_, in_hw_[0], in_hw_[1]});
    b.nodes = attach_decoder(b.graph, in, spec_, strided_, "d.", seed_);
    return built_.emplace(batch, std::move(b)).first->second;
  }

  DecoderSpec spec_;
  std::size_t in_channels_;
  Hw in_hw_;
  std::uint64_t seed_;
  std::vector<bool> strided_;
  DecoderPlan plan_;
  std::map<std::size_t, Built> built_;
  State<T> params_;
};

template <typename T>
Tensor<T> project(Decoder<T>& decoder, const Tensor<T>& features) {
  return decoder.project(features);
}

// InfoNCE ------------------------------------------------------------------------------

/// 2N unit-norm projections; rows 2i and 2i+1 are the two views of source i.
template <typename T>
struct ContrastiveBatch {
  Tensor<T> projections;
  T temperature = T(0.1);
};

template <typename T>
T info_nce(const ContrastiveBatch<T>& batch) {
  ops::InfoNceOp<T> op(batch.temperature);
  const Shape s = batch.projections.shape();
  op.infer_shape(std::span<const Shape>(&s, 1));
  Tensor<T> out;
  const Tensor<T>* in[] = {&batch.projections};
  op.forward(in, out, ForwardContext{});
  return out.item();
}

/// Single-anchor contrastive loss: -log(exp(q.k+/tau) / sum over {k+} ∪ negatives).
inline double anchor_loss(double q_pos, const std::vector<double>& q_neg, double tau) {
  if (!(tau > 0)) throw ConfigError("anchor_loss: temperature must be positive");
  double mx = q_pos / tau;
  for (double v : q_neg) mx = std::max(mx, v / tau);
  double se = std::exp(q_pos / tau - mx);
  for (double v : q_neg) se += std::exp(v / tau - mx);
  return mx + std::log(se) - q_pos / tau;
}

}  // namespace loco
