#pragma once

#include <random>
#include <string>
#include <vector>

#include "loco/gradcheck.hpp"
#include "loco/ops.hpp"
#include "loco/topology.hpp"

namespace loco {

struct SuiteRow {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

namespace detail {

inline Tensor<double> uniform_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

inline SuiteRow row_of(std::string name, const GradCheckResult& r) {
  return {std::move(name), r.max_rel_error, r.checked, r.skipped_kinks};
}

}  // namespace detail

inline const std::vector<std::string>& primitive_names() {
  static const std::vector<std::string> names{
      "add",          "sub",          "mul",           "scale",           "sum",
      "mean",         "squared_dist", "relu",          "conv2d_grouped",  "conv2d_1x1",
      "batch_norm",   "batch_norm_eval", "max_pool",   "resize_down",     "resize_up",
      "global_avg_pool", "linear",    "l2_normalize",  "info_nce",        "batch_norm_1d"};
  return names;
}

/// Finite-difference check of every primitive in 64-bit. Each output is
/// contracted with a fixed random tensor so every element carries a
/// distinct upstream gradient.
inline std::vector<SuiteRow> primitive_gradient_suite(std::uint64_t seed = 0, double eps = 1e-5) {
  using G = Graph<double>;
  std::vector<SuiteRow> rows;
  for (std::size_t k = 0; k < primitive_names().size(); ++k) {
    std::mt19937_64 rng(seed * 1000 + 100 + k);
    SuiteRow row{primitive_names()[k]};
    for (int trial = 0; trial < 3; ++trial) {
      G g;
      const NodeId a = g.parameter("a", detail::uniform_tensor({3, 4}, rng));
      const NodeId b = g.parameter("b", detail::uniform_tensor({3, 4}, rng));
      const NodeId img = g.parameter("img", detail::uniform_tensor({2, 4, 5, 5}, rng));
      auto bn_params = [&] {
        return std::pair{g.parameter("gamma", detail::uniform_tensor({4}, rng)),
                         g.parameter("beta", detail::uniform_tensor({4}, rng))};
      };
      NodeId y = 0;
      switch (k) {
        case 0: y = ops::add(g, a, b); break;
        case 1: y = ops::sub(g, a, b); break;
        case 2: y = ops::mul(g, a, b); break;
        case 3: y = ops::scale(g, a, -1.7); break;
        case 4: y = ops::sum(g, a); break;
        case 5: y = ops::mean(g, a); break;
        case 6: y = ops::squared_distance(g, a, b); break;
        case 7: y = ops::relu(g, a); break;
        case 8: {
          const ConvSpec s{4, 6, {3, 3}, {2, 2}, {1, 1}, 2};
          y = ops::conv2d(g, img, g.parameter("w", detail::uniform_tensor(s.weight_shape(), rng)), s);
          break;
        }
        case 9: {
          const ConvSpec s{4, 4, {1, 1}, {1, 1}, {0, 0}, 1};
          y = ops::conv2d(g, img, g.parameter("w", detail::uniform_tensor(s.weight_shape(), rng)), s);
          break;
        }
        case 10: {
          auto [gm, bt] = bn_params();
          y = ops::batch_norm(g, img, gm, bt, "bn");
          break;
        }
        case 11: {
          auto [gm, bt] = bn_params();
          y = ops::batch_norm(g, img, gm, bt, "bn");
          g.set_training(false);
          break;
        }
        case 12: y = ops::max_pool(g, img, PoolSpec{3, 2, 1}); break;
        case 13: y = ops::bilinear_resize(g, img, Hw{3, 4}); break;
        case 14: y = ops::bilinear_resize(g, img, Hw{7, 9}); break;
        case 15: y = ops::global_avg_pool(g, img); break;
        case 16: {
          const NodeId w = g.parameter("w", detail::uniform_tensor({5, 4}, rng));
          y = ops::linear(g, a, w, g.parameter("bias", detail::uniform_tensor({5}, rng)));
          break;
        }
        case 17: y = ops::l2_normalize(g, a); break;
        case 18: {
          const NodeId z = g.parameter("z", detail::uniform_tensor({6, 5}, rng));
          y = ops::info_nce(g, ops::l2_normalize(g, z), 0.5);
          break;
        }
        case 19: {
          auto [gm, bt] = bn_params();
          y = ops::batch_norm(g, a, gm, bt, "bn1d");
          break;
        }
      }
      const Shape ys = g.shape(y);
      const NodeId r = g.constant(detail::uniform_tensor(ys, rng));
      const NodeId loss = ops::sum(g, ops::mul(g, y, r));
      GradCheckOptions opt;
      opt.eps = eps;
      opt.samples_per_param = 64;
      opt.seed = seed + trial;
      const auto res = check_gradients(g, loss, opt);
      row.max_rel_error = std::max(row.max_rel_error, res.max_rel_error);
      row.checked += res.checked;
      row.skipped_kinks += res.skipped_kinks;
    }
    rows.push_back(row);
  }
  return rows;
}

/// Checks each unit's encoder -> decoder -> InfoNCE gradient under that
/// unit's routing, plus the soft sharing penalty when present. Parameters the
/// routing excludes (zero routed gradient) are not sampled.
inline std::vector<SuiteRow> model_gradient_suite(const ArchitectureSpec& arch, const TopologyChoice& choice,
                                                  const DecoderSpec& decoder, std::size_t views = 6,
                                                  std::uint64_t seed = 0, std::size_t samples = 4, double eps = 1e-5) {
  std::mt19937_64 rng(seed);
  LocalModel<double> model(arch, build_units(arch, choice), decoder, views, seed + 1);
  const auto batch = detail::uniform_tensor({views, arch.input_channels, arch.input_hw[0], arch.input_hw[1]}, rng);
  model.forward_once(batch);
  std::vector<SuiteRow> rows;
  for (std::size_t u = 0; u < model.num_units(); ++u) {
    const auto routed = model.unit_gradients(u);
    GradCheckOptions opt;
    opt.eps = eps;
    opt.samples_per_param = samples;
    opt.seed = seed + u;
    opt.backward = model.unit_options(u);
    opt.filter = [&](const std::string& name) {
      auto it = routed.find(name);
      return it != routed.end() && it->second.norm() > 0;
    };
    rows.push_back(detail::row_of("unit" + std::to_string(u), check_gradients(model.graph(), model.unit_loss(u), opt)));
  }
  if (auto p = model.penalty_node()) {
    GradCheckOptions opt;
    opt.eps = eps;
    opt.samples_per_param = samples;
    opt.filter = [](const std::string& name) { return name.rfind("s", 0) == 0 || name.rfind("u", 0) == 0; };
    rows.push_back(detail::row_of("soft_share_penalty", check_gradients(model.graph(), *p, opt)));
  }
  return rows;
}

}  // namespace loco
