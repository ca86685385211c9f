#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "loco/contrastive.hpp"
#include "loco/encoder.hpp"

namespace loco {

enum class TopologyMode { e2e, gim, loco, share_blocks, upper_grad_only, soft_share };

/// Mode plus its parameter (k for share_blocks, lambda for soft_share).
struct TopologyChoice {
  TopologyMode mode = TopologyMode::loco;
  std::size_t k = 1;
  double lambda = 1e-3;

  friend bool operator==(const TopologyChoice&, const TopologyChoice&) = default;
};

inline std::string to_string(const TopologyChoice& c) {
  switch (c.mode) {
    case TopologyMode::e2e: return "e2e";
    case TopologyMode::gim: return "gim";
    case TopologyMode::loco: return "loco";
    case TopologyMode::upper_grad_only: return "upper_grad_only";
    case TopologyMode::share_blocks: return "share_blocks(" + std::to_string(c.k) + ")";
    case TopologyMode::soft_share: {
      std::ostringstream os;
      os.precision(17);
      os << "soft_share(" << c.lambda << ")";
      return os.str();
    }
  }
  return "?";
}

/// Parses e2e | gim | loco | upper_grad_only | share_blocks(k) | soft_share(lambda).
inline TopologyChoice parse_topology(const std::string& text) {
  TopologyChoice c;
  auto arg = [&](const std::string& head) -> std::optional<std::string> {
    if (text.rfind(head + "(", 0) != 0 || text.back() != ')') return std::nullopt;
    return text.substr(head.size() + 1, text.size() - head.size() - 2);
  };
  if (text == "e2e") c.mode = TopologyMode::e2e;
  else if (text == "gim") c.mode = TopologyMode::gim;
  else if (text == "loco") c.mode = TopologyMode::loco;
  else if (text == "upper_grad_only") c.mode = TopologyMode::upper_grad_only;
  else if (text == "share_blocks") c.mode = TopologyMode::share_blocks;
  else if (text == "soft_share") c.mode = TopologyMode::soft_share;
  else if (auto a = arg("share_blocks")) {
    c.mode = TopologyMode::share_blocks;
    try {
      std::size_t used = 0;
      c.k = std::stoul(*a, &used);
      if (used != a->size()) throw std::invalid_argument(*a);
    } catch (const std::exception&) {
      throw ConfigError("topology: bad block count in '" + text + "'");
    }
  } else if (auto b = arg("soft_share")) {
    c.mode = TopologyMode::soft_share;
    try {
      std::size_t used = 0;
      c.lambda = std::stod(*b, &used);
      if (used != b->size()) throw std::invalid_argument(*b);
    } catch (const std::exception&) {
      throw ConfigError("topology: bad lambda in '" + text + "'");
    }
  } else {
    throw ConfigError("unknown topology '" + text +
                      "' (expected e2e, gim, loco, upper_grad_only, share_blocks(k) or soft_share(lambda))");
  }
  if (c.mode == TopologyMode::soft_share && !(c.lambda >= 0)) throw ConfigError("topology: lambda must be >= 0");
  return c;
}

/// A local learning unit: stages [lo, hi], plus `extra_blocks` leading
/// blocks of stage hi+1 whose output feeds the unit's decoder.
struct Unit {
  std::size_t lo = 0;
  std::size_t hi = 0;
  std::size_t extra_blocks = 0;

  friend bool operator==(const Unit&, const Unit&) = default;
};

struct TopologySpec {
  TopologyChoice choice;
  std::size_t n_stages = 0;
  std::vector<Unit> units;

  TopologyMode mode() const { return choice.mode; }

  /// Number of units whose span contains each stage.
  std::vector<std::size_t> membership() const {
    std::vector<std::size_t> m(n_stages, 0);
    for (const Unit& u : units)
      for (std::size_t s = u.lo; s <= u.hi; ++s) ++m[s];
    return m;
  }
};

inline TopologySpec build_units(std::size_t n_stages, const TopologyChoice& choice,
                                const std::vector<std::size_t>& blocks_per_stage = {}) {
  if (n_stages == 0) throw ConfigError("topology: need at least one stage");
  TopologySpec t;
  t.choice = choice;
  t.n_stages = n_stages;
  if (choice.mode == TopologyMode::soft_share && !(choice.lambda >= 0)) {
    throw ConfigError("topology: lambda must be >= 0");
  }
  if (n_stages == 1) {
    t.units = {Unit{0, 0, 0}};
    return t;
  }
  switch (choice.mode) {
    case TopologyMode::e2e: t.units = {Unit{0, n_stages - 1, 0}}; break;
    case TopologyMode::gim:
      for (std::size_t i = 0; i < n_stages; ++i) t.units.push_back({i, i, 0});
      break;
    case TopologyMode::loco:
    case TopologyMode::upper_grad_only:
    case TopologyMode::soft_share:
      for (std::size_t i = 0; i + 1 < n_stages; ++i) t.units.push_back({i, i + 1, 0});
      break;
    case TopologyMode::share_blocks:
      if (blocks_per_stage.size() != n_stages) {
        throw ConfigError("topology: share_blocks needs the block count of every stage");
      }
      for (std::size_t i = 0; i < n_stages; ++i) {
        const bool last = i + 1 == n_stages;
        if (!last && choice.k >= blocks_per_stage[i + 1]) {
          throw ConfigError("topology: share_blocks(" + std::to_string(choice.k) + ") needs fewer blocks than stage " +
                            std::to_string(i + 1) + " has (" + std::to_string(blocks_per_stage[i + 1]) + ")");
        }
        t.units.push_back({i, i, last ? 0 : choice.k});
      }
      break;
  }
  return t;
}

inline TopologySpec build_units(const ArchitectureSpec& arch, const TopologyChoice& choice) {
  return build_units(arch.num_stages(), choice, arch.blocks_per_stage());
}

/// Total backward FLOPs: each stage's cost counted once per unit containing
/// it. With per-block costs, blocks borrowed by share_blocks units are
/// counted again for the borrowing unit.
inline double backward_cost(const TopologySpec& t, const std::vector<double>& stage_costs,
                            const std::vector<std::vector<double>>* block_costs = nullptr) {
  if (stage_costs.size() != t.n_stages) throw ShapeError("backward_cost: cost vector does not match stage count");
  const auto m = t.membership();
  double total = 0;
  for (std::size_t s = 0; s < t.n_stages; ++s) total += static_cast<double>(m[s]) * stage_costs[s];
  if (block_costs) {
    for (const Unit& u : t.units)
      for (std::size_t b = 0; b < u.extra_blocks; ++b) total += block_costs->at(u.hi + 1).at(b);
  }
  return total;
}

/// Per-stage execution counts and per-unit losses of one training step.
struct RouteReport {
  std::vector<std::size_t> forward_counts;
  std::vector<std::size_t> backward_counts;
  std::vector<double> unit_losses;
};

template <typename T>
struct LocalBackwardResult {
  GradientMap<T> grads;
  std::vector<T> unit_losses;
  T penalty{0};
  std::vector<std::size_t> backward_counts;
};

/// Single encoder state from a full model state: keeps encoder tensors and
/// averages soft-shared replicas ("u<k>." prefixed) into their primary.
template <typename T>
State<T> merge_encoder_state(const State<T>& all) {
  State<T> out;
  std::map<std::string, int> copies;
  for (const auto& [name, t] : all) {
    if (name.rfind("s", 0) == 0) {
      out[name] = t;
      copies[name] = 1;
    }
  }
  for (const auto& [name, t] : all) {
    if (name.rfind("u", 0) != 0) continue;
    const std::string primary = name.substr(name.find('.') + 1);
    auto it = out.find(primary);
    if (it == out.end()) throw ConfigError("replica '" + name + "' has no primary");
    it->second += t;
    ++copies[primary];
  }
  for (auto& [name, t] : out)
    if (copies[name] > 1) t *= T{1} / static_cast<T>(copies[name]);
  return out;
}

/// Encoder, per-unit decoders and losses in one static graph over a batch of
/// 2N views. The encoder runs once per step; every unit then backpropagates
/// its own loss, stopping at its input boundary.
template <typename T>
class LocalModel {
 public:
  LocalModel(ArchitectureSpec arch, TopologySpec topo, DecoderSpec decoder, std::size_t views, std::uint64_t seed)
      : arch_(std::move(arch)), topo_(std::move(topo)), dec_(decoder), views_(views), seed_(seed) {
    if (topo_.n_stages != arch_.num_stages()) {
      throw ConfigError("topology has " + std::to_string(topo_.n_stages) + " stages, architecture has " +
                        std::to_string(arch_.num_stages()));
    }
    build();
  }

  LocalModel(const LocalModel&) = delete;
  LocalModel& operator=(const LocalModel&) = delete;

  const ArchitectureSpec& arch() const { return arch_; }
  const TopologySpec& topology() const { return topo_; }
  const DecoderSpec& decoder() const { return dec_; }
  std::size_t views() const { return views_; }
  Graph<T>& graph() { return g_; }
  const Graph<T>& graph() const { return g_; }
  NodeId input() const { return input_; }
  std::size_t num_units() const { return units_.size(); }
  NodeId unit_loss(std::size_t u) const { return units_.at(u).loss; }
  const BackwardOptions& unit_options(std::size_t u) const { return units_.at(u).opts; }
  NodeId unit_projection(std::size_t u) const { return units_.at(u).dec.z; }
  const EncoderNodes<T>& encoder_nodes() const { return enc_; }
  std::optional<NodeId> penalty_node() const { return penalty_; }

  std::vector<Tensor<T>> boundaries() const {
    std::vector<Tensor<T>> out;
    for (NodeId id : enc_.boundaries()) out.push_back(g_.value(id));
    return out;
  }

  /// Binds the views ([2N, C, H, W], pairs adjacent) and evaluates every
  /// stage, decoder and loss once.
  RouteReport forward_once(const Tensor<T>& batch) {
    g_.bind(input_, batch);
    g_.forward();
    RouteReport r;
    r.forward_counts = forward_counts();
    r.backward_counts.assign(topo_.n_stages, 0);
    for (const auto& u : units_) r.unit_losses.push_back(static_cast<double>(g_.value(u.loss).item()));
    return r;
  }

  std::vector<std::size_t> forward_counts() const {
    std::vector<std::size_t> counts(topo_.n_stages, 0);
    for (const auto& [stage, reps] : g_.stage_replicas()) counts.at(static_cast<std::size_t>(stage)) = reps.size();
    return counts;
  }

  /// Sum of every unit's gradient (ascending unit order), plus the soft
  /// sharing penalty's gradient.
  LocalBackwardResult<T> local_backward() {
    if (!g_.evaluated()) throw ConfigError("local_backward: run forward_once first");
    LocalBackwardResult<T> r;
    r.backward_counts.assign(topo_.n_stages, 0);
    for (std::size_t u = 0; u < units_.size(); ++u) {
      BackwardTrace trace;
      g_.backward_into(units_[u].loss, r.grads, units_[u].opts, &trace);
      for (int s : trace.stages_touched) ++r.backward_counts.at(static_cast<std::size_t>(s));
      r.unit_losses.push_back(g_.value(units_[u].loss).item());
    }
    if (penalty_) {
      g_.backward_into(*penalty_, r.grads);
      r.penalty = g_.value(*penalty_).item();
    }
    return r;
  }

  /// Gradient of a single unit's loss under that unit's routing.
  GradientMap<T> unit_gradients(std::size_t u) {
    if (!g_.evaluated()) throw ConfigError("unit_gradients: run forward_once first");
    GradientMap<T> g;
    g_.backward_into(units_.at(u).loss, g, units_[u].opts);
    return g;
  }

  T soft_share_penalty() const { return penalty_ ? g_.value(*penalty_).item() : T{0}; }

  /// Every parameter and buffer of the model (encoder, replicas, decoders).
  State<T> state() const { return export_state(g_); }
  void load(const State<T>& s) { load_state(g_, s); }

  /// A single encoder's parameters and buffers. Soft-shared replicas are
  /// averaged with their primary copy.
  State<T> encoder_state() const { return merge_encoder_state(export_state(g_)); }

 private:
  struct UnitNodes {
    NodeId top = 0;
    DecoderNodes dec;
    NodeId loss = 0;
    BackwardOptions opts;
  };

  void build() {
    const std::size_t n = topo_.n_stages;
    const auto resolved = resolve(arch_);
    input_ = g_.input("x", {views_, arch_.input_channels, arch_.input_hw[0], arch_.input_hw[1]});
    enc_ = build_encoder_nodes(g_, arch_, input_, seed_);
    const bool soft = topo_.mode() == TopologyMode::soft_share && n > 1;
    std::vector<std::pair<std::string, std::string>> tied;  // (primary, replica)

    for (std::size_t ui = 0; ui < topo_.units.size(); ++ui) {
      const Unit& u = topo_.units[ui];
      UnitNodes un;
      un.top = enc_.stages[u.hi].output;
      if (u.extra_blocks > 0) un.top = enc_.stages[u.hi + 1].block_outputs.at(u.extra_blocks - 1);
      if (soft && u.hi + 1 < n) {
        // Stage hi is primarily owned by unit hi; this unit trains its own replica.
        const std::string prefix = "u" + std::to_string(ui) + ".";
        const std::size_t before = g_.size();
        const StageNodes rep = build_stage(g_, arch_, resolved, u.hi, enc_.stages[u.lo].output, seed_,
                                           StageTag{static_cast<int>(u.hi), 1}, prefix);
        un.top = rep.output;
        for (NodeId id = before; id < g_.size(); ++id) {
          const auto& node = g_.node(id);
          if (node.kind == Graph<T>::Kind::parameter) tied.emplace_back(node.name.substr(prefix.size()), node.name);
        }
      }
      std::vector<std::size_t> following;
      for (std::size_t s = u.hi + 1; s < n; ++s) following.push_back(arch_.stages[s].blocks.size());
      un.dec = attach_decoder(g_, un.top, dec_, decoder_block_strides(dec_, following), "d" + std::to_string(ui) + ".",
                              seed_);
      un.loss = ops::info_nce(g_, un.dec.z, static_cast<T>(dec_.temperature));
      if (u.lo > 0) un.opts.cuts.push_back(enc_.stages[u.lo - 1].output);
      if (topo_.mode() == TopologyMode::upper_grad_only && u.hi > u.lo && u.hi + 1 < n) {
        const int shared = static_cast<int>(u.hi);
        un.opts.keep_param = [shared](const std::string&, StageTag tag) { return tag.stage != shared; };
      }
      units_.push_back(std::move(un));
    }

    if (soft && !tied.empty()) {
      const T lambda = static_cast<T>(topo_.choice.lambda);
      NodeId total = 0;
      for (std::size_t i = 0; i < tied.size(); ++i) {
        const NodeId d = ops::squared_distance(g_, g_.id_of(tied[i].first), g_.id_of(tied[i].second));
        total = i == 0 ? d : ops::add(g_, total, d);
      }
      penalty_ = ops::scale(g_, total, lambda);
    }
  }

  ArchitectureSpec arch_;
  TopologySpec topo_;
  DecoderSpec dec_;
  std::size_t views_;
  std::uint64_t seed_;
  Graph<T> g_;
  NodeId input_ = 0;
  EncoderNodes<T> enc_;
  std::vector<UnitNodes> units_;
  std::optional<NodeId> penalty_;
};

/// lambda * sum over (primary, replica) pairs of squared Euclidean distance.
template <typename T>
T soft_share_penalty(const std::vector<std::pair<Tensor<T>, Tensor<T>>>& replicas, T lambda) {
  if (!(lambda >= T{0})) throw ConfigError("soft_share_penalty: lambda must be >= 0");
  T total{0};
  for (const auto& [a, b] : replicas) {
    if (a.shape() != b.shape()) {
      throw ShapeError("soft_share_penalty: replica shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  }
  return lambda * total;
}

}  // namespace loco
