#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "loco/arch.hpp"
#include "loco/graph.hpp"
#include "loco/ops.hpp"

namespace loco {

/// Named parameters and buffers of a model.
template <typename T>
using State = std::map<std::string, Tensor<T>>;

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Centered uniform U(-sqrt(6/fan_in), +sqrt(6/fan_in)); the stream depends
/// only on (key, seed), so identically named parameters always match.
template <typename T>
Tensor<T> uniform_init(const std::string& key, const Shape& shape, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(detail::splitmix64(detail::fnv1a(key) ^ detail::splitmix64(seed)));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(shape);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

/// Adds trainable parameters to a graph. `prefix` namespaces the names;
/// `init_prefix` namespaces the init stream (replicas reuse the primary's).
template <typename T>
struct ParamFactory {
  Graph<T>* g;
  std::string prefix;
  std::string init_prefix;
  std::uint64_t seed;
  StageTag tag;

  ParamFactory sub(const std::string& part) const {
    return {g, prefix + part + ".", init_prefix + part + ".", seed, tag};
  }

  NodeId weight(const std::string& name, const Shape& shape, std::size_t fan_in) const {
    return g->parameter(prefix + name, uniform_init<T>(init_prefix + name, shape, fan_in, seed), tag);
  }
  NodeId filled(const std::string& name, const Shape& shape, T value) const {
    return g->parameter(prefix + name, Tensor<T>(shape, value), tag);
  }
};

/// conv -> batch norm (no activation).
template <typename T>
NodeId conv_bn(const ParamFactory<T>& pf, NodeId x, const ConvSpec& spec, const std::string& conv_name,
               const std::string& bn_name) {
  Graph<T>& g = *pf.g;
  const NodeId w = pf.weight(conv_name + ".w", spec.weight_shape(), spec.fan_in());
  const NodeId y = ops::conv2d(g, x, w, spec, pf.tag);
  const NodeId gamma = pf.filled(bn_name + ".gamma", {spec.out_channels}, T{1});
  const NodeId beta = pf.filled(bn_name + ".beta", {spec.out_channels}, T{0});
  return ops::batch_norm(g, y, gamma, beta, pf.prefix + bn_name, pf.tag);
}

template <typename T>
NodeId build_block(const ParamFactory<T>& pf, NodeId x, const BlockSpec& spec, const ResolvedBlock& r) {
  Graph<T>& g = *pf.g;
  NodeId in = x;
  if (spec.downsample.kind == Downsample::Kind::bilinear) in = ops::bilinear_resize(g, x, r.resized_hw, pf.tag);
  NodeId y = in;
  for (std::size_t j = 0; j < spec.convs.size(); ++j) {
    y = conv_bn(pf, y, spec.convs[j], "conv" + std::to_string(j), "bn" + std::to_string(j));
    if (j + 1 < spec.convs.size()) y = ops::relu(g, y, pf.tag);
  }
  if (spec.residual) {
    const NodeId shortcut = r.shortcut ? conv_bn(pf, in, *r.shortcut, "proj", "proj_bn") : in;
    y = ops::add(g, y, shortcut, pf.tag);
  }
  return ops::relu(g, y, pf.tag);
}

struct StageNodes {
  NodeId input = 0;
  std::vector<NodeId> block_outputs;
  NodeId output = 0;
};

/// Appends stage `index` (the stem too, for stage 0) reading from `x`.
/// Parameters are named `<prefix>s<index>.…`.
template <typename T>
StageNodes build_stage(Graph<T>& g, const ArchitectureSpec& arch, const std::vector<ResolvedStage>& resolved,
                       std::size_t index, NodeId x, std::uint64_t seed, StageTag tag,
                       const std::string& prefix = {}) {
  const std::string base = "s" + std::to_string(index);
  ParamFactory<T> pf{&g, prefix + base + ".", base + ".", seed, tag};
  StageNodes s;
  s.input = x;
  NodeId y = x;
  if (index == 0) {
    y = ops::relu(g, conv_bn(pf, y, arch.stem.conv, "stem.conv", "stem.bn"), tag);
    if (arch.stem.pool) y = ops::max_pool(g, y, *arch.stem.pool, tag);
  }
  const StageSpec& st = arch.stages.at(index);
  for (std::size_t b = 0; b < st.blocks.size(); ++b) {
    y = build_block(pf.sub("b" + std::to_string(b)), y, st.blocks[b], resolved.at(index).blocks[b]);
    s.block_outputs.push_back(y);
  }
  s.output = y;
  return s;
}

template <typename T>
struct EncoderNodes {
  NodeId input = 0;
  std::vector<StageNodes> stages;

  std::vector<NodeId> boundaries() const {
    std::vector<NodeId> out;
    for (const auto& s : stages) out.push_back(s.output);
    return out;
  }
};

/// Builds every stage in sequence on an input node of shape [batch, C, H, W].
template <typename T>
EncoderNodes<T> build_encoder_nodes(Graph<T>& g, const ArchitectureSpec& arch, NodeId input, std::uint64_t seed) {
  const auto resolved = resolve(arch);
  EncoderNodes<T> e;
  e.input = input;
  NodeId x = input;
  for (std::size_t i = 0; i < arch.stages.size(); ++i) {
    e.stages.push_back(build_stage(g, arch, resolved, i, x, seed, StageTag{static_cast<int>(i), 0}));
    x = e.stages.back().output;
  }
  return e;
}

/// Copies matching entries of `state` into the graph's parameters and buffers.
template <typename T>
void load_state(Graph<T>& g, const State<T>& state, bool require_all = true) {
  for (const auto& [name, id] : g.parameters()) {
    auto it = state.find(name);
    if (it == state.end()) {
      if (require_all) throw ConfigError("state is missing parameter '" + name + "'");
      continue;
    }
    Tensor<T>& p = g.param(name);
    if (p.shape() != it->second.shape()) {
      throw ShapeError("state '" + name + "': expected " + shape_str(p.shape()) + ", got " +
                       shape_str(it->second.shape()));
    }
    p = it->second;
  }
  for (auto& [name, buf] : g.buffers()) {
    auto it = state.find(name);
    if (it == state.end()) {
      if (require_all) throw ConfigError("state is missing buffer '" + name + "'");
      continue;
    }
    if (buf.shape() != it->second.shape()) throw ShapeError("state buffer '" + name + "': shape mismatch");
    buf = it->second;
  }
}

template <typename T>
State<T> export_state(const Graph<T>& g) {
  State<T> s;
  for (const auto& [name, id] : g.parameters()) s[name] = g.param(name);
  for (const auto& [name, buf] : g.buffers()) s[name] = buf;
  return s;
}

/// Standalone staged encoder. Keeps one graph per batch size, all sharing
/// the same parameter state.
template <typename T>
class Encoder {
 public:
  explicit Encoder(ArchitectureSpec arch, std::uint64_t seed = 0) : arch_(std::move(arch)), seed_(seed) {
    validate(arch_);
    state_ = export_state(graph_for(1).graph);
  }

  const ArchitectureSpec& arch() const { return arch_; }
  std::size_t num_stages() const { return arch_.stages.size(); }

  State<T>& state() { return state_; }
  const State<T>& state() const { return state_; }
  void set_state(const State<T>& s) {
    for (const auto& [k, v] : state_) {
      auto it = s.find(k);
      if (it == s.end()) throw ConfigError("encoder state is missing '" + k + "'");
      if (it->second.shape() != v.shape()) throw ShapeError("encoder state '" + k + "': shape mismatch");
    }
    for (auto& [k, v] : state_) v = s.at(k);
  }

  /// Boundary tensors (one per stage) for an NCHW batch. Train mode updates
  /// the running statistics held in the state.
  std::vector<Tensor<T>> forward(const Tensor<T>& x, bool training = false) {
    if (x.rank() != 4) throw ShapeError("encoder: expected NCHW input, got " + shape_str(x.shape()));
    Built& b = graph_for(x.dim(0));
    load_state(b.graph, state_);
    b.graph.set_training(training);
    b.graph.bind(b.nodes.input, x);
    b.graph.forward();
    if (training) {
      for (const auto& [name, buf] : b.graph.buffers()) state_[name] = buf;
    }
    std::vector<Tensor<T>> out;
    for (NodeId id : b.nodes.boundaries()) out.push_back(b.graph.value(id));
    return out;
  }

  std::vector<Shape> boundary_shapes(std::size_t batch) {
    Built& b = graph_for(batch);
    std::vector<Shape> out;
    for (NodeId id : b.nodes.boundaries()) out.push_back(b.graph.shape(id));
    return out;
  }

 private:
  struct Built {
    Graph<T> graph;
    EncoderNodes<T> nodes;
  };

  Built& graph_for(std::size_t batch) {
    auto it = built_.find(batch);
    if (it != built_.end()) return it->second;
    Built b;
    const NodeId in = b.graph.input("x", {batch, arch_.input_channels, arch_.input_hw[0], arch_.input_hw[1]});
    b.nodes = build_encoder_nodes(b.graph, arch_, in, seed_);
    return built_.emplace(batch, std::move(b)).first->second;
  }

  ArchitectureSpec arch_;
  std::uint64_t seed_;
  std::map<std::size_t, Built> built_;
  State<T> state_;
};

}  // namespace loco
