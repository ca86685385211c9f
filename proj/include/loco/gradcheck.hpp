#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "loco/graph.hpp"

namespace loco {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Elements sampled per parameter tensor (all when the tensor is smaller).
  std::size_t samples_per_param = 8;
  std::uint64_t seed = 0;
  BackwardOptions backward;
  /// Parameters to check; empty checks all.
  std::function<bool(const std::string&)> filter;
};

struct ParamCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

struct GradCheckResult {
  std::map<std::string, ParamCheck> params;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Compares `backward` against central differences on sampled parameter
/// elements. Elements whose +eps/-eps evaluations take different relu or
/// max-pool branches are skipped and counted.
template <typename T>
GradCheckResult check_gradients(Graph<T>& g, NodeId loss, const GradCheckOptions& opt = {}) {
  g.forward();
  GradientMap<T> analytic;
  g.backward_into(loss, analytic, opt.backward);
  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  for (const auto& [name, id] : g.parameters()) {
    if (opt.filter && !opt.filter(name)) continue;
    const std::size_t n = g.param(name).size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > opt.samples_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.samples_per_param);
      std::sort(idx.begin(), idx.end());
    }
    ParamCheck pc;
    for (std::size_t i : idx) {
      const FiniteDiff fd = finite_diff(g, loss, name, i, opt.eps);
      if (fd.crossed_kink) {
        ++pc.skipped_kinks;
        continue;
      }
      const double a = static_cast<double>(analytic.at(name)[i]);
      pc.max_rel_error = std::max(pc.max_rel_error, relative_error(a, fd.value));
      ++pc.checked;
    }
    res.max_rel_error = std::max(res.max_rel_error, pc.max_rel_error);
    res.checked += pc.checked;
    res.skipped_kinks += pc.skipped_kinks;
    res.params[name] = pc;
  }
  return res;
}

}  // namespace loco
