#pragma once

#include <cstdlib>
#include <optional>
#include <string>

#include "loco/trainer.hpp"

namespace loco {

/// Where training images come from: a seeded generator or an LCIM file.
struct DataSource {
  std::optional<SyntheticConfig> synthetic;
  std::optional<std::string> path;

  friend bool operator==(const DataSource&, const DataSource&) = default;

  void validate() const {
    if (synthetic.has_value() == path.has_value()) throw ConfigError("data: give exactly one of 'synthetic' or 'path'");
    if (synthetic) synthetic->validate();
    if (path && path->empty()) throw ConfigError("data.path: must not be empty");
  }
};

struct RunConfig {
  TrainConfig train;
  std::string output_dir = "run";
  std::size_t metrics_every = 10;  // flush cadence in steps
  DataSource data{SyntheticConfig{}, std::nullopt};
  std::size_t test_holdout = 5;  // every k-th group of 10 images is held out for probe testing
  ProbeConfig probe;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const {
    train.validate();
    data.validate();
    probe.validate();
    if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
    if (metrics_every == 0) throw ConfigError("metrics_every: must be >= 1");
    if (test_holdout < 2) throw ConfigError("test_holdout: must be >= 2");
  }
};

inline json synthetic_to_json(const SyntheticConfig& s) {
  return {{"count", s.count}, {"hw", s.hw}, {"classes", s.classes}, {"seed", s.seed}};
}

inline SyntheticConfig synthetic_from_json(const json& j) {
  jsonu::reject_unknown(j, {"count", "hw", "classes", "seed"}, "data.synthetic");
  SyntheticConfig s;
  s.count = jsonu::get_or(j, "count", s.count, "data.synthetic");
  s.hw = jsonu::get_or(j, "hw", s.hw, "data.synthetic");
  s.classes = jsonu::get_or(j, "classes", s.classes, "data.synthetic");
  s.seed = jsonu::get_or(j, "seed", s.seed, "data.synthetic");
  s.validate();
  return s;
}

inline json run_config_to_json(const RunConfig& c) {
  json j = train_config_to_json(c.train);
  json data = json::object();
  if (c.data.synthetic) data["synthetic"] = synthetic_to_json(*c.data.synthetic);
  if (c.data.path) data["path"] = *c.data.path;
  j["output_dir"] = c.output_dir;
  j["metrics_every"] = c.metrics_every;
  j["data"] = data;
  j["test_holdout"] = c.test_holdout;
  j["probe"] = probe_to_json(c.probe);
  return j;
}

/// Builds a validated RunConfig from a parsed document. `arch` is either a
/// preset name (sized by `input_hw`, else augment.output_hw, else the preset
/// default) or a full architecture object. LOCO_SEED, when set, replaces the
/// training seed.
inline RunConfig run_config_from_json(const json& j, bool apply_env = true) {
  jsonu::reject_unknown(j,
                        {"arch", "input_hw", "topology", "decoder", "augment", "optimizer", "schedule", "batch", "seed",
                         "precision", "checkpoint_every", "output_dir", "metrics_every", "data", "test_holdout", "probe"},
                        "config");
  RunConfig c;
  TrainConfig& t = c.train;

  const json augment = j.value("augment", json::object());
  if (!j.contains("arch")) throw ConfigError("config: missing required key 'arch'");
  const json& arch = j.at("arch");
  if (arch.is_string()) {
    std::optional<Hw> in;
    if (j.contains("input_hw")) in = jsonu::pair_of(j.at("input_hw"), "input_hw");
    else if (augment.is_object() && augment.contains("output_hw")) in = jsonu::pair_of(augment.at("output_hw"), "augment.output_hw");
    t.arch = preset_arch(arch.get<std::string>(), in);
  } else if (arch.is_object()) {
    if (j.contains("input_hw")) throw ConfigError("input_hw: only valid with a preset arch name");
    t.arch = arch_from_json(arch);
  } else {
    throw ConfigError("arch: expected a preset name or an architecture object");
  }
  validate(t.arch);

  t.topology = parse_topology(jsonu::get_or<std::string>(j, "topology", to_string(t.topology), "config"));
  if (j.contains("decoder")) t.decoder = decoder_from_json(j.at("decoder"));
  AugmentConfig aug;
  aug.output_hw = t.arch.input_hw;
  t.augment = augment_from_json(augment, aug);
  if (j.contains("optimizer")) t.optimizer = optimizer_from_json(j.at("optimizer"));
  if (j.contains("schedule")) t.schedule = schedule_from_json(j.at("schedule"));
  t.batch = jsonu::get_or(j, "batch", t.batch, "config");
  t.seed = jsonu::get_or(j, "seed", t.seed, "config");
  const auto precision = jsonu::get_or<std::string>(j, "precision", to_string(t.precision), "config");
  if (precision == "f32") t.precision = Precision::f32;
  else if (precision == "f64") t.precision = Precision::f64;
  else throw ConfigError("precision: expected 'f32' or 'f64', got '" + precision + "'");
  t.checkpoint_every = jsonu::get_or(j, "checkpoint_every", t.checkpoint_every, "config");

  c.output_dir = jsonu::get_or(j, "output_dir", c.output_dir, "config");
  c.metrics_every = jsonu::get_or(j, "metrics_every", c.metrics_every, "config");
  c.test_holdout = jsonu::get_or(j, "test_holdout", c.test_holdout, "config");
  if (j.contains("data")) {
    const json& d = j.at("data");
    jsonu::reject_unknown(d, {"synthetic", "path"}, "data");
    c.data = {};
    if (d.contains("synthetic")) c.data.synthetic = synthetic_from_json(d.at("synthetic"));
    if (d.contains("path")) c.data.path = jsonu::require<std::string>(d, "path", "data");
  } else {
    c.data.synthetic->hw = t.arch.input_hw[0];
  }
  if (j.contains("probe")) c.probe = probe_from_json(j.at("probe"));

  if (apply_env) {
    if (const char* s = std::getenv("LOCO_SEED"); s && *s) {
      try {
        std::size_t used = 0;
        t.seed = std::stoull(s, &used);
        if (used != std::string(s).size()) throw std::invalid_argument(s);
      } catch (const std::exception&) {
        throw ConfigError(std::string("LOCO_SEED: not an unsigned integer: '") + s + "'");
      }
    }
  }
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "config", bool apply_env = true) {
  return run_config_from_json(jsonu::parse_with_lines(text, source), apply_env);
}

inline RunConfig load_config(const std::string& path, bool apply_env = true) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text, path, apply_env);
}

inline std::string serialize(const RunConfig& c) { return run_config_to_json(c).dump(2) + "\n"; }

inline Dataset load_data(const RunConfig& c) {
  Dataset d = c.data.synthetic ? make_synthetic(*c.data.synthetic) : read_lcim(*c.data.path);
  if (d.c != c.train.arch.input_channels) {
    throw ConfigError("data has " + std::to_string(d.c) + " channels, arch expects " +
                      std::to_string(c.train.arch.input_channels));
  }
  return d;
}

}  // namespace loco
