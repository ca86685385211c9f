#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "loco/graph.hpp"
#include "loco/json_util.hpp"

namespace loco {

struct ScheduleConfig {
  double base_lr = 0.3;
  std::size_t warmup_epochs = 1;
  std::size_t total_epochs = 10;
  std::size_t steps_per_epoch = 1;

  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;

  void validate() const {
    if (!(base_lr > 0) || !std::isfinite(base_lr)) throw ConfigError("schedule.base_lr must be > 0");
    if (total_epochs == 0) throw ConfigError("schedule.total_epochs must be >= 1");
    if (warmup_epochs > total_epochs) throw ConfigError("schedule.warmup_epochs must not exceed total_epochs");
    if (steps_per_epoch == 0) throw ConfigError("schedule.steps_per_epoch must be >= 1");
  }
  std::size_t total_steps() const { return total_epochs * steps_per_epoch; }
  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
};

/// Linear warmup from 0, then a single cosine decay to 0 at the final step.
inline double lr_at(const ScheduleConfig& s, std::size_t step) {
  s.validate();
  const std::size_t total = s.total_steps(), warm = s.warmup_steps();
  if (step > total) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  if (step < warm) return s.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total == warm) return s.base_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

enum class OptimizerKind { sgd, lars };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::lars;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double trust = 1e-3;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;

  void validate() const {
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("optimizer.momentum must be in [0, 1)");
    if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (kind == OptimizerKind::lars && (!(trust > 0) || !std::isfinite(trust))) {
      throw ConfigError("optimizer.trust must be > 0 for lars");
    }
  }
};

inline constexpr double kLarsEps = 1e-9;

namespace detail {
template <typename T>
void require_aligned(const Tensor<T>& w, const Tensor<T>& g, const char* who) {
  if (w.shape() != g.shape()) {
    throw ShapeError(std::string(who) + ": parameter " + shape_str(w.shape()) + " vs gradient " + shape_str(g.shape()));
  }
}
}  // namespace detail

/// v <- m v + g + wd w; w <- w - lr v. `velocity` is created on first use.
template <typename T>
void sgd_step(Tensor<T>& w, const Tensor<T>& g, double lr, double momentum, double wd, Tensor<T>* velocity = nullptr) {
  detail::require_aligned(w, g, "sgd_step");
  if (velocity && (velocity->shape() != w.shape() || velocity->size() != w.size())) *velocity = Tensor<T>::zeros(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    T d = g[i] + static_cast<T>(wd) * w[i];
    if (velocity) {
      T& v = (*velocity)[i];
      v = static_cast<T>(momentum) * v + d;
      d = v;
    }
    w[i] -= static_cast<T>(lr) * d;
  }
}

/// Layer-wise trust ratio eta |w| / (|g| + wd |w| + eps), applied per tensor.
/// Tensors with a zero weight or gradient norm get a ratio of 1.
template <typename T>
double lars_local_rate(const Tensor<T>& w, const Tensor<T>& g, double trust, double wd) {
  const double wn = static_cast<double>(w.norm()), gn = static_cast<double>(g.norm());
  if (wn == 0 || gn == 0) return 1.0;
  return trust * wn / (gn + wd * wn + kLarsEps);
}

/// w <- w - lr * local * (g + wd w), with optional heavy-ball momentum on the
/// scaled update.
template <typename T>
void lars_step(Tensor<T>& w, const Tensor<T>& g, double lr, double trust, double wd, double momentum = 0,
               Tensor<T>* velocity = nullptr) {
  detail::require_aligned(w, g, "lars_step");
  const double scale = lr * lars_local_rate(w, g, trust, wd);
  if (velocity && (velocity->shape() != w.shape() || velocity->size() != w.size())) *velocity = Tensor<T>::zeros(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    T d = static_cast<T>(scale) * (g[i] + static_cast<T>(wd) * w[i]);
    if (velocity) {
      T& v = (*velocity)[i];
      v = static_cast<T>(momentum) * v + d;
      d = v;
    }
    w[i] -= d;
  }
}

/// Applies one optimizer step to every parameter of a graph that has a
/// gradient. Parameters are visited in name order.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(Graph<T>& g, const GradientMap<T>& grads, double lr) {
    for (const auto& [name, grad] : grads) {
      Tensor<T>& w = g.param(name);
      Tensor<T>* v = cfg_.momentum > 0 ? &velocity_[name] : nullptr;
      if (cfg_.kind == OptimizerKind::sgd) {
        sgd_step(w, grad, lr, cfg_.momentum, cfg_.weight_decay, v);
      } else {
        lars_step(w, grad, lr, cfg_.trust, cfg_.weight_decay, cfg_.momentum, v);
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor<T>>& velocity() const { return velocity_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor<T>> velocity_;
};

inline json schedule_to_json(const ScheduleConfig& s) {
  return json{{"base_lr", s.base_lr}, {"warmup_epochs", s.warmup_epochs}, {"total_epochs", s.total_epochs}};
}

/// steps_per_epoch is derived from the dataset and batch size, so it is not
/// part of the serialized form.
inline ScheduleConfig schedule_from_json(const json& j) {
  jsonu::reject_unknown(j, {"base_lr", "warmup_epochs", "total_epochs"}, "schedule");
  ScheduleConfig s;
  s.base_lr = jsonu::get_or(j, "base_lr", s.base_lr, "schedule");
  s.warmup_epochs = jsonu::get_or(j, "warmup_epochs", s.warmup_epochs, "schedule");
  s.total_epochs = jsonu::get_or(j, "total_epochs", s.total_epochs, "schedule");
  s.validate();
  return s;
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "lars"; }

inline json optimizer_to_json(const OptimizerConfig& o) {
  return json{{"kind", to_string(o.kind)}, {"momentum", o.momentum}, {"weight_decay", o.weight_decay}, {"trust", o.trust}};
}

inline OptimizerConfig optimizer_from_json(const json& j) {
  jsonu::reject_unknown(j, {"kind", "momentum", "weight_decay", "trust"}, "optimizer");
  OptimizerConfig o;
  const std::string kind = jsonu::get_or<std::string>(j, "kind", to_string(o.kind), "optimizer");
  if (kind == "sgd") o.kind = OptimizerKind::sgd;
  else if (kind == "lars") o.kind = OptimizerKind::lars;
  else throw ConfigError("optimizer.kind: expected 'sgd' or 'lars', got '" + kind + "'");
  o.momentum = jsonu::get_or(j, "momentum", o.momentum, "optimizer");
  o.weight_decay = jsonu::get_or(j, "weight_decay", o.weight_decay, "optimizer");
  o.trust = jsonu::get_or(j, "trust", o.trust, "optimizer");
  o.validate();
  return o;
}

}  // namespace loco
