#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "loco/arch.hpp"
#include "loco/contrastive.hpp"
#include "loco/topology.hpp"

namespace loco {

/// Which activations count toward a stage's memory.
///  blocks: one tensor per residual block output (stem excluded).
///  layers: every conv / pool / resize output, including the stem and
///          projection shortcuts; BN, ReLU and residual adds are in place.
enum class AccountingRule { blocks, layers };

inline std::string to_string(AccountingRule r) { return r == AccountingRule::blocks ? "blocks" : "layers"; }

inline AccountingRule parse_accounting(const std::string& s) {
  if (s == "blocks") return AccountingRule::blocks;
  if (s == "layers") return AccountingRule::layers;
  throw ConfigError("accounting rule must be 'blocks' or 'layers', got '" + s + "'");
}

struct StageStats {
  std::vector<std::string> names;
  std::vector<double> activation_bytes;                    // whole batch
  std::vector<std::vector<double>> block_activation_bytes;  // per block, same rule
  std::vector<double> param_bytes;
  std::vector<double> forward_flops;  // per sample, one multiply-add = one FLOP
  std::vector<double> backward_flops;

  std::size_t size() const { return activation_bytes.size(); }

  void validate() const {
    const std::size_t n = size();
    if (n == 0) throw ConfigError("stage stats: no stages");
    if (param_bytes.size() != n || forward_flops.size() != n || backward_flops.size() != n) {
      throw ShapeError("stage stats: per-stage vectors differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!(activation_bytes[i] >= 0) || !(param_bytes[i] >= 0) || !(forward_flops[i] >= 0) || !(backward_flops[i] >= 0)) {
        throw ConfigError("stage stats: values must be non-negative and finite");
      }
    }
  }

  double total_activation() const {
    double s = 0;
    for (double a : activation_bytes) s += a;
    return s;
  }
  double total_forward_flops() const {
    double s = 0;
    for (double f : forward_flops) s += f;
    return s;
  }
  std::vector<double> activation_fractions() const { return normalized(activation_bytes); }
  std::vector<double> flops_fractions() const { return normalized(forward_flops); }

  /// Stats carrying only activation sizes, e.g. published memory fractions.
  static StageStats from_activations(const std::vector<double>& act) {
    StageStats s;
    for (std::size_t i = 0; i < act.size(); ++i) {
      s.names.push_back("stage" + std::to_string(i));
      s.block_activation_bytes.push_back({act[i]});
    }
    s.activation_bytes = act;
    s.param_bytes.assign(act.size(), 0);
    s.forward_flops.assign(act.size(), 0);
    s.backward_flops.assign(act.size(), 0);
    s.validate();
    return s;
  }

 private:
  static std::vector<double> normalized(const std::vector<double>& v) {
    double t = 0;
    for (double x : v) t += x;
    std::vector<double> out(v.size(), 0.0);
    if (t > 0)
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / t;
    return out;
  }
};

inline double conv_flops(const ConvSpec& c, Hw out) {
  return static_cast<double>(out[0] * out[1] * c.out_channels) *
         static_cast<double>(c.kernel[0] * c.kernel[1] * (c.in_channels / c.groups));
}

inline double conv_params(const ConvSpec& c) {
  return static_cast<double>(c.out_channels * (c.in_channels / c.groups) * c.kernel[0] * c.kernel[1]);
}

/// Closed-form per-stage accounting. Stage 0 includes the stem for FLOPs,
/// parameters and (under the layers rule) activations.
inline StageStats stage_stats(const ArchitectureSpec& arch, std::size_t batch = 1, double bytes_per_element = 4,
                              AccountingRule rule = AccountingRule::blocks) {
  if (batch == 0) throw ConfigError("stage_stats: batch must be >= 1");
  if (!(bytes_per_element > 0)) throw ConfigError("stage_stats: bytes per element must be > 0");
  const auto resolved = resolve(arch);
  const double scale = static_cast<double>(batch) * bytes_per_element;
  StageStats s;
  for (std::size_t si = 0; si < resolved.size(); ++si) {
    const ResolvedStage& rs = resolved[si];
    const StageSpec& spec = arch.stages[si];
    double act = 0, params = 0, flops = 0;
    std::vector<double> blocks;
    if (rs.has_stem) {
      const ConvSpec& c = arch.stem.conv;
      flops += conv_flops(c, rs.stem_conv_hw);
      params += conv_params(c) + 2.0 * static_cast<double>(c.out_channels);
      if (rule == AccountingRule::layers) {
        act += static_cast<double>(c.out_channels * rs.stem_conv_hw[0] * rs.stem_conv_hw[1]);
        if (arch.stem.pool) act += static_cast<double>(c.out_channels * rs.stem_pool_hw[0] * rs.stem_pool_hw[1]);
      }
    }
    for (std::size_t bi = 0; bi < rs.blocks.size(); ++bi) {
      const ResolvedBlock& rb = rs.blocks[bi];
      const BlockSpec& bs = spec.blocks[bi];
      double block_act = 0;
      if (rule == AccountingRule::layers && rb.resized_hw != rb.in_hw) {
        block_act += static_cast<double>(rb.in_channels * rb.resized_hw[0] * rb.resized_hw[1]);
      }
      for (std::size_t ci = 0; ci < bs.convs.size(); ++ci) {
        const ConvSpec& c = bs.convs[ci];
        const Hw o = rb.conv_out_hw[ci];
        flops += conv_flops(c, o);
        params += conv_params(c) + 2.0 * static_cast<double>(c.out_channels);
        if (rule == AccountingRule::layers) block_act += static_cast<double>(c.out_channels * o[0] * o[1]);
      }
      if (rb.shortcut) {
        flops += conv_flops(*rb.shortcut, rb.out_hw);
        params += conv_params(*rb.shortcut) + 2.0 * static_cast<double>(rb.out_channels);
        if (rule == AccountingRule::layers) block_act += static_cast<double>(rb.out_channels * rb.out_hw[0] * rb.out_hw[1]);
      }
      if (rule == AccountingRule::blocks) block_act = static_cast<double>(rb.out_channels * rb.out_hw[0] * rb.out_hw[1]);
      blocks.push_back(block_act * scale);
      act += block_act;
    }
    s.names.push_back(spec.name);
    s.activation_bytes.push_back(act * scale);
    s.block_activation_bytes.push_back(std::move(blocks));
    s.param_bytes.push_back(params * bytes_per_element);
    s.forward_flops.push_back(flops);
    s.backward_flops.push_back(2 * flops);
  }
  s.validate();
  return s;
}

/// Activation bytes of one unit's decoder under the same rule: per block,
/// either its output or its two conv outputs; the pooled vector and MLP
/// activations are included under the layers rule.
inline double decoder_activation_bytes(const DecoderSpec& spec, const std::vector<bool>& strided, std::size_t in_c,
                                       Hw in_hw, std::size_t batch, double bytes, AccountingRule rule) {
  const DecoderPlan p = plan_decoder(spec, strided, in_c, in_hw);
  double act = 0;
  for (const Hw& hw : p.block_out_hw) {
    const double e = static_cast<double>(p.channels * hw[0] * hw[1]);
    act += rule == AccountingRule::layers ? 2 * e : e;
  }
  if (rule == AccountingRule::layers) {
    act += static_cast<double>(p.channels) * static_cast<double>(spec.mlp_layers);
    act += static_cast<double>(spec.projection_dim);
  }
  return act * static_cast<double>(batch) * bytes;
}

/// Decoder activation bytes for every unit of a topology, for use as
/// peak_memory's `unit_extra`. Each decoder reads its unit's top stage.
inline std::vector<double> unit_decoder_bytes(const ArchitectureSpec& arch, const TopologySpec& topo,
                                              const DecoderSpec& decoder, std::size_t batch, double bytes,
                                              AccountingRule rule) {
  const auto resolved = resolve(arch);
  std::vector<double> out;
  for (const Unit& u : topo.units) {
    std::vector<std::size_t> following;
    for (std::size_t s = u.hi + 1; s < arch.num_stages(); ++s) following.push_back(arch.stages[s].blocks.size());
    const ResolvedStage& top = resolved.at(u.hi);
    out.push_back(decoder_activation_bytes(decoder, decoder_block_strides(decoder, following), top.out_channels,
                                           top.out_hw, batch, bytes, rule));
  }
  return out;
}

struct MemoryModel {
  double overhead = 0;  // fraction of the e2e activation total
  double bytes_per_element = 4;
  std::size_t batch = 1;

  void validate() const {
    if (!(overhead >= 0) || !std::isfinite(overhead)) throw ConfigError("memory model: overhead must be finite and >= 0");
    if (batch == 0) throw ConfigError("memory model: batch must be >= 1");
  }
};

struct PeakReport {
  double activation_peak = 0;  // bytes
  double activation_fraction = 0;  // of the e2e activation total
  double total_peak = 0;
  double e2e_total_peak = 0;
  double ratio = 1;
  std::vector<double> unit_activation;  // per unit
};

/// Activation peak of a topology: the largest sum of activations held by
/// any unit (each stage stays alive until every unit containing it has
/// finished backward). `unit_extra` adds per-unit bytes such as decoders.
inline PeakReport peak_memory(const StageStats& stats, const TopologySpec& topo, const MemoryModel& model = {},
                              const std::vector<double>& unit_extra = {}) {
  stats.validate();
  model.validate();
  if (topo.n_stages != stats.size()) {
    throw ShapeError("peak_memory: topology has " + std::to_string(topo.n_stages) + " stages, stats have " +
                     std::to_string(stats.size()));
  }
  if (!unit_extra.empty() && unit_extra.size() != topo.units.size()) {
    throw ShapeError("peak_memory: unit_extra must have one entry per unit");
  }
  const double total = stats.total_activation();
  PeakReport r;
  for (std::size_t u = 0; u < topo.units.size(); ++u) {
    const Unit& unit = topo.units[u];
    double a = 0;
    for (std::size_t s = unit.lo; s <= unit.hi; ++s) a += stats.activation_bytes[s];
    if (unit.extra_blocks > 0) {
      const auto& blocks = stats.block_activation_bytes.at(unit.hi + 1);
      for (std::size_t b = 0; b < unit.extra_blocks && b < blocks.size(); ++b) a += blocks[b];
    }
    if (!unit_extra.empty()) a += unit_extra[u];
    r.unit_activation.push_back(a);
    r.activation_peak = std::max(r.activation_peak, a);
  }
  double e2e_extra = 0;
  if (!unit_extra.empty()) e2e_extra = *std::max_element(unit_extra.begin(), unit_extra.end());
  if (topo.mode() == TopologyMode::e2e || topo.units.size() == 1) r.activation_peak = total + e2e_extra;
  r.activation_fraction = total > 0 ? r.activation_peak / total : 0;
  r.total_peak = r.activation_peak + model.overhead * total;
  r.e2e_total_peak = total + e2e_extra + model.overhead * total;
  r.ratio = r.e2e_total_peak / r.total_peak;
  return r;
}

/// Overhead o such that (1 + o) / (p + o) equals the target saving ratio,
/// with p the topology's activation-peak fraction.
inline double fit_overhead(const StageStats& stats, const TopologySpec& topo, double target) {
  if (!(target > 1) || !std::isfinite(target)) throw ConfigError("fit_overhead: target ratio must be > 1");
  const double p = peak_memory(stats, topo).activation_fraction;
  const double best = 1.0 / p;
  if (best < target * (1 - 1e-12)) {
    throw ConfigError("fit_overhead: target " + std::to_string(target) + " is infeasible; ratio at zero overhead is " +
                      std::to_string(best));
  }
  return std::max(0.0, (1 - target * p) / (target - 1));
}

// Model-parallel schedule simulation --------------------------------------------

struct ScheduleEvent {
  bool forward = true;
  std::size_t worker = 0, micro = 0;
  double start = 0, end = 0;
};

struct ScheduleReport {
  double makespan = 0;
  std::vector<double> busy, idle;
  std::vector<std::size_t> peak_in_flight;
  double bubble_fraction = 0;
  std::vector<ScheduleEvent> events;
};

/// Greedy event-driven schedule, one worker per stage. Forward of microbatch
/// b on worker i follows forward b on worker i-1. Under e2e, backward b on
/// worker i waits for backward b on worker i+1; under local topologies it
/// only waits for the worker's own forward. Each worker's backward cost is
/// multiplied by the number of units containing its stage. An idle worker
/// takes a ready forward before a ready backward, lowest microbatch first;
/// simultaneous decisions are made in worker order.
inline ScheduleReport simulate_parallel(const std::vector<double>& fwd, const std::vector<double>& bwd,
                                        const TopologySpec& topo, std::size_t micro) {
  const std::size_t S = fwd.size();
  if (S == 0 || bwd.size() != S) throw ShapeError("simulate_parallel: need one forward and backward cost per stage");
  if (topo.n_stages != S) throw ShapeError("simulate_parallel: topology/stage count mismatch");
  if (micro == 0) throw ConfigError("simulate_parallel: microbatches must be >= 1");
  for (std::size_t i = 0; i < S; ++i)
    if (!(fwd[i] > 0) || !(bwd[i] > 0)) throw ConfigError("simulate_parallel: costs must be > 0");

  const bool chained = topo.mode() == TopologyMode::e2e || topo.units.size() == 1;
  const auto mult = topo.membership();
  constexpr double kNever = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> f_done(S, std::vector<double>(micro, kNever)), b_done = f_done;
  std::vector<std::size_t> next_f(S, 0), next_b(S, 0);
  std::vector<double> free_at(S, 0.0);
  std::vector<bool> running(S, false);
  ScheduleReport r;
  r.busy.assign(S, 0);
  r.idle.assign(S, 0);
  r.peak_in_flight.assign(S, 0);
  std::vector<std::size_t> in_flight(S, 0);

  auto f_ready = [&](std::size_t i, double t) {
    const std::size_t b = next_f[i];
    return b < micro && (i == 0 || f_done[i - 1][b] <= t);
  };
  auto b_ready = [&](std::size_t i, double t) {
    const std::size_t b = next_b[i];
    if (b >= micro || f_done[i][b] > t) return false;
    if (chained && i + 1 < S) return b_done[i + 1][b] <= t;
    return true;
  };

  double t = 0;
  std::size_t remaining = 2 * S * micro;
  while (remaining > 0) {
    for (std::size_t i = 0; i < S; ++i) {
      if (running[i] && free_at[i] <= t) running[i] = false;
      if (running[i]) continue;
      ScheduleEvent e;
      e.worker = i;
      e.start = t;
      if (f_ready(i, t)) {
        e.forward = true;
        e.micro = next_f[i]++;
        e.end = t + fwd[i];
        f_done[i][e.micro] = e.end;
        r.peak_in_flight[i] = std::max(r.peak_in_flight[i], ++in_flight[i]);
      } else if (b_ready(i, t)) {
        e.forward = false;
        e.micro = next_b[i]++;
        e.end = t + bwd[i] * static_cast<double>(std::max<std::size_t>(mult[i], 1));
        b_done[i][e.micro] = e.end;
      } else {
        continue;
      }
      r.busy[i] += e.end - e.start;
      free_at[i] = e.end;
      running[i] = true;
      r.events.push_back(e);
      --remaining;
    }
    // Activations are released when the backward that consumes them ends.
    double next = kNever;
    for (std::size_t i = 0; i < S; ++i)
      if (running[i] && free_at[i] > t) next = std::min(next, free_at[i]);
    if (next == kNever) {
      if (remaining > 0) throw Error("simulate_parallel: schedule deadlocked");
      break;
    }
    t = next;
    for (std::size_t i = 0; i < S; ++i) {
      std::size_t done = 0;
      for (std::size_t b = 0; b < micro; ++b) done += b_done[i][b] <= t;
      const std::size_t started = next_f[i];
      in_flight[i] = started - std::min(started, done);
    }
  }
  for (const auto& e : r.events) r.makespan = std::max(r.makespan, e.end);
  double busy = 0;
  for (std::size_t i = 0; i < S; ++i) {
    r.idle[i] = r.makespan - r.busy[i];
    busy += r.busy[i];
  }
  r.bubble_fraction = r.makespan > 0 ? 1.0 - busy / (r.makespan * static_cast<double>(S)) : 0.0;
  return r;
}

// Export ------------------------------------------------------------------------

inline json stats_to_json(const StageStats& s) {
  json stages = json::array();
  const auto af = s.activation_fractions(), ff = s.flops_fractions();
  for (std::size_t i = 0; i < s.size(); ++i) {
    stages.push_back({{"name", s.names.at(i)},
                      {"activation_bytes", s.activation_bytes[i]},
                      {"activation_fraction", af[i]},
                      {"param_bytes", s.param_bytes[i]},
                      {"forward_flops", s.forward_flops[i]},
                      {"backward_flops", s.backward_flops[i]},
                      {"flops_fraction", ff[i]}});
  }
  return {{"stages", stages},
          {"total_activation_bytes", s.total_activation()},
          {"total_forward_flops", s.total_forward_flops()}};
}

inline json peak_to_json(const PeakReport& p) {
  return {{"activation_peak_bytes", p.activation_peak},
          {"activation_peak_fraction", p.activation_fraction},
          {"total_peak_bytes", p.total_peak},
          {"e2e_total_peak_bytes", p.e2e_total_peak},
          {"saving_ratio", p.ratio},
          {"unit_activation_bytes", p.unit_activation}};
}

inline json schedule_to_json(const ScheduleReport& r) {
  return {{"makespan", r.makespan},
          {"busy", r.busy},
          {"idle", r.idle},
          {"peak_in_flight", r.peak_in_flight},
          {"bubble_fraction", r.bubble_fraction},
          {"events", r.events.size()}};
}

inline void write_timeline_csv(std::ostream& os, const ScheduleReport& r) {
  os << "event,worker,t_start,t_end\n";
  for (const auto& e : r.events) {
    os << (e.forward ? 'F' : 'B') << e.micro << ',' << e.worker << ',' << e.start << ',' << e.end << '\n';
  }
}

}  // namespace loco
