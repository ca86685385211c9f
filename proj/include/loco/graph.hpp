#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "loco/error.hpp"
#include "loco/tensor.hpp"

namespace loco {

using NodeId = std::size_t;

/// Which encoder stage (and which replica of it) a node belongs to.
/// Nodes outside the encoder carry stage -1.
struct StageTag {
  int stage = -1;
  int replica = 0;
};

struct ForwardContext {
  bool training = true;
  std::vector<std::string>* warnings = nullptr;
};

/// A primitive differentiable operation.
///
/// `forward` writes the result into `out` (which may hold a previous
/// result of the same shape). `backward` accumulates into every non-null
/// entry of `gin`; entries are null for inputs that need no gradient.
template <typename T>
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view name() const = 0;
  virtual Shape infer_shape(std::span<const Shape> in) const = 0;
  virtual void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext& ctx) = 0;
  virtual void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, const Tensor<T>& gout,
                        std::span<Tensor<T>* const> gin) = 0;
  virtual bool blocks_gradient() const { return false; }
  /// Hash of the piecewise-linear branch taken by the last forward (relu
  /// signs, pool argmax). Zero for smooth ops.
  virtual std::uint64_t kink_signature() const { return 0; }
};

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

struct BackwardOptions {
  /// Nodes at which propagation halts: they are neither visited nor
  /// propagate into their inputs.
  std::vector<NodeId> cuts;
  /// Parameters for which this pass contributes gradient. Empty keeps all.
  std::function<bool(const std::string&, StageTag)> keep_param;
};

struct BackwardTrace {
  std::set<int> stages_touched;
  std::size_t nodes_visited = 0;
};

/// Static computation graph with reverse-mode differentiation.
///
/// Nodes are appended in topological order. Inputs, parameters and
/// constants are leaves; every other node applies an Op to earlier nodes.
/// A graph is single-writer: forward/backward must not run concurrently on
/// the same instance.
template <typename T>
class Graph {
 public:
  enum class Kind { input, parameter, constant, compute };

  struct Node {
    Kind kind = Kind::compute;
    std::unique_ptr<Op<T>> op;
    std::vector<NodeId> inputs;
    Shape shape;
    std::string name;
    StageTag tag;
    bool requires_grad = false;
    bool bound = false;
    Tensor<T> value;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  NodeId input(std::string name, Shape shape, StageTag tag = {}) {
    Node n;
    n.kind = Kind::input;
    n.shape = std::move(shape);
    n.name = name;
    n.tag = tag;
    NodeId id = push(std::move(n));
    if (!name.empty()) named_[name] = id;
    return id;
  }

  NodeId parameter(const std::string& name, Tensor<T> init, StageTag tag = {}) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Node n;
    n.kind = Kind::parameter;
    n.shape = init.shape();
    n.name = name;
    n.tag = tag;
    n.requires_grad = true;
    n.bound = true;
    n.value = std::move(init);
    NodeId id = push(std::move(n));
    params_[name] = id;
    named_[name] = id;
    return id;
  }

  NodeId constant(Tensor<T> value) {
    Node n;
    n.kind = Kind::constant;
    n.shape = value.shape();
    n.bound = true;
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId apply(std::unique_ptr<Op<T>> op, std::vector<NodeId> inputs, StageTag tag = {}, std::string name = {}) {
    std::vector<Shape> shapes;
    bool needs = false;
    for (NodeId in : inputs) {
      check_node(in);
      shapes.push_back(nodes_[in].shape);
      needs = needs || nodes_[in].requires_grad;
    }
    Node n;
    n.shape = op->infer_shape(shapes);
    n.requires_grad = needs && !op->blocks_gradient();
    n.op = std::move(op);
    n.inputs = std::move(inputs);
    n.tag = tag;
    n.name = name;
    NodeId id = push(std::move(n));
    if (!name.empty()) named_[name] = id;
    return id;
  }

  /// Forward identity whose backward contribution is exactly zero.
  NodeId stop_gradient(NodeId x);

  /// Named non-trainable state (running statistics). Created on first use.
  Tensor<T>& buffer(const std::string& name, const Shape& shape, T init) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) it = buffers_.emplace(name, Tensor<T>(shape, init)).first;
    return it->second;
  }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  void bind(NodeId id, const Tensor<T>& value) {
    check_node(id);
    Node& n = nodes_[id];
    if (n.kind != Kind::input) throw ConfigError("bind: node " + std::to_string(id) + " is not an input");
    if (value.shape() != n.shape) {
      throw ShapeError("bind '" + n.name + "': expected " + shape_str(n.shape) + ", got " + shape_str(value.shape()));
    }
    n.value = value;
    n.bound = true;
    evaluated_ = false;
  }

  void bind(const std::string& name, const Tensor<T>& value) { bind(id_of(name), value); }

  /// Evaluates every node in order.
  void forward() {
    ForwardContext ctx{training_, &warnings_};
    std::vector<const Tensor<T>*> in;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (n.kind != Kind::compute) {
        if (!n.bound) throw ConfigError("unbound input '" + n.name + "' (node " + std::to_string(id) + ")");
        continue;
      }
      in.clear();
      for (NodeId i : n.inputs) in.push_back(&nodes_[i].value);
      n.op->forward(in, n.value, ctx);
      if (n.value.shape() != n.shape) {
        throw ShapeError("node " + std::to_string(id) + " (" + std::string(n.op->name()) + ") produced " +
                         shape_str(n.value.shape()) + ", declared " + shape_str(n.shape));
      }
      if (check_finite_ && !n.value.all_finite()) {
        throw NumericError("non-finite value at node " + std::to_string(id) + " (" + std::string(n.op->name()) + ")");
      }
    }
    evaluated_ = true;
  }

  /// Binds the given inputs, runs forward, and returns the requested named
  /// nodes (all named nodes when `names` is empty).
  std::map<std::string, Tensor<T>> evaluate(const std::map<std::string, Tensor<T>>& bindings,
                                            const std::vector<std::string>& names = {}) {
    for (const auto& [k, v] : bindings) bind(k, v);
    forward();
    std::map<std::string, Tensor<T>> out;
    if (names.empty()) {
      for (const auto& [k, id] : named_) out[k] = nodes_[id].value;
    } else {
      for (const auto& k : names) out[k] = value(id_of(k));
    }
    return out;
  }

  /// Accumulates gradients of the scalar `loss` into `acc` (one entry per
  /// parameter; entries are created as zeros when absent).
  void backward_into(NodeId loss, GradientMap<T>& acc, const BackwardOptions& opts = {},
                     BackwardTrace* trace = nullptr);

  /// Gradient of `loss` for every parameter; unreachable parameters map to zeros.
  GradientMap<T> backward(NodeId loss, const BackwardOptions& opts = {}) {
    GradientMap<T> g;
    backward_into(loss, g, opts);
    return g;
  }

  const Tensor<T>& value(NodeId id) const {
    check_node(id);
    return nodes_[id].value;
  }
  const Shape& shape(NodeId id) const {
    check_node(id);
    return nodes_[id].shape;
  }
  const Node& node(NodeId id) const {
    check_node(id);
    return nodes_[id];
  }
  std::size_t size() const { return nodes_.size(); }
  bool evaluated() const { return evaluated_; }

  NodeId id_of(const std::string& name) const {
    auto it = named_.find(name);
    if (it == named_.end()) throw ConfigError("unknown node '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return named_.count(name) != 0; }

  Tensor<T>& param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    evaluated_ = false;
    return nodes_[it->second].value;
  }
  const Tensor<T>& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return nodes_[it->second].value;
  }
  const std::map<std::string, NodeId>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [k, id] : params_) n += nodes_[id].value.size();
    return n;
  }

  /// Distinct (stage, replica) pairs among the compute nodes.
  std::map<int, std::set<int>> stage_replicas() const {
    std::map<int, std::set<int>> out;
    for (const Node& n : nodes_) {
      if (n.kind == Kind::compute && n.tag.stage >= 0) out[n.tag.stage].insert(n.tag.replica);
    }
    return out;
  }

  std::uint64_t kink_signature() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Node& n : nodes_) {
      if (n.kind != Kind::compute) continue;
      h ^= n.op->kink_signature();
      h *= 1099511628211ULL;
    }
    return h;
  }

  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return nodes_.size() - 1;
  }

  void check_node(NodeId id) const {
    if (id >= nodes_.size()) throw ConfigError("unknown node id " + std::to_string(id));
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> params_;
  std::map<std::string, NodeId> named_;
  std::map<std::string, Tensor<T>> buffers_;
  std::vector<std::string> warnings_;
  std::vector<Tensor<T>> grads_;
  std::vector<char> has_grad_;
  bool training_ = true;
#ifdef NDEBUG
  bool check_finite_ = false;
#else
  bool check_finite_ = true;
#endif
  bool evaluated_ = false;
};

namespace detail {

template <typename T>
class StopGradientOp final : public Op<T> {
 public:
  std::string_view name() const override { return "stop_gradient"; }
  Shape infer_shape(std::span<const Shape> in) const override { return in[0]; }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const ForwardContext&) override {
    out = *in[0];
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>&,
                std::span<Tensor<T>* const>) override {}
  bool blocks_gradient() const override { return true; }
};

}  // namespace detail

template <typename T>
NodeId Graph<T>::stop_gradient(NodeId x) {
  check_node(x);
  return apply(std::make_unique<detail::StopGradientOp<T>>(), {x}, nodes_[x].tag);
}

template <typename T>
void Graph<T>::backward_into(NodeId loss, GradientMap<T>& acc, const BackwardOptions& opts, BackwardTrace* trace) {
  check_node(loss);
  if (!evaluated_) throw ConfigError("backward: graph has not been evaluated");
  if (nodes_[loss].value.size() != 1) {
    throw ShapeError("backward: loss node " + std::to_string(loss) + " is not scalar (" +
                     shape_str(nodes_[loss].shape) + ")");
  }
  for (const auto& [name, id] : params_) {
    if (!acc.count(name)) acc.emplace(name, Tensor<T>::zeros(nodes_[id].shape));
  }
  if (!nodes_[loss].requires_grad) return;

  grads_.resize(nodes_.size());
  has_grad_.assign(nodes_.size(), 0);
  std::vector<char> cut(nodes_.size(), 0);
  for (NodeId c : opts.cuts) {
    check_node(c);
    cut[c] = 1;
  }
  if (cut[loss]) return;

  grads_[loss].resize(nodes_[loss].shape);
  grads_[loss].fill(T{1});
  has_grad_[loss] = 1;

  std::vector<const Tensor<T>*> in;
  std::vector<Tensor<T>*> gin;
  for (NodeId id = loss + 1; id-- > 0;) {
    if (!has_grad_[id] || cut[id]) continue;
    Node& n = nodes_[id];
    if (trace) {
      ++trace->nodes_visited;
      if (n.tag.stage >= 0) trace->stages_touched.insert(n.tag.stage);
    }
    if (n.kind == Kind::parameter) {
      if (!opts.keep_param || opts.keep_param(n.name, n.tag)) acc.at(n.name) += grads_[id];
      continue;
    }
    if (n.kind != Kind::compute) continue;
    in.clear();
    gin.clear();
    bool any = false;
    for (NodeId i : n.inputs) {
      in.push_back(&nodes_[i].value);
      if (nodes_[i].requires_grad && !cut[i]) {
        if (!has_grad_[i]) {
          grads_[i].resize(nodes_[i].shape);
          grads_[i].fill(T{0});
          has_grad_[i] = 1;
        }
        gin.push_back(&grads_[i]);
        any = true;
      } else {
        gin.push_back(nullptr);
      }
    }
    if (any) n.op->backward(in, n.value, grads_[id], gin);
  }
}

struct FiniteDiff {
  double value = 0;
  /// True when the +eps and -eps evaluations took different piecewise branches.
  bool crossed_kink = false;
};

/// Central difference of a scalar loss node with respect to one parameter
/// element. Restores the parameter and re-evaluates before returning.
template <typename T>
FiniteDiff finite_diff(Graph<T>& g, NodeId loss, const std::string& param, std::size_t index, double eps) {
  if (!(eps > 0)) throw ConfigError("finite_diff: eps must be positive");
  Tensor<T>& p = g.param(param);
  if (index >= p.size()) {
    throw ShapeError("finite_diff: index " + std::to_string(index) + " out of range for '" + param + "'");
  }
  const T saved = p[index];
  p[index] = static_cast<T>(saved + eps);
  g.forward();
  const double plus = static_cast<double>(g.value(loss).item());
  const std::uint64_t sig_plus = g.kink_signature();
  g.param(param)[index] = static_cast<T>(saved - eps);
  g.forward();
  const double minus = static_cast<double>(g.value(loss).item());
  const std::uint64_t sig_minus = g.kink_signature();
  g.param(param)[index] = saved;
  g.forward();
  return {(plus - minus) / (2.0 * eps), sig_plus != sig_minus};
}

template <typename T>
double finite_diff_grad(Graph<T>& g, NodeId loss, const std::string& param, std::size_t index, double eps) {
  return finite_diff(g, loss, param, index, eps).value;
}

/// Relative error used by every gradient check: |a-b| / max(|a|, |b|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace loco
