#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "loco/analysis.hpp"
#include "loco/config.hpp"
#include "loco/gradsuite.hpp"

namespace loco {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitRuntime = 3 };

namespace cli {

inline std::vector<double> parse_list(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": bad number '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(flag + ": empty list");
  return out;
}

inline std::filesystem::path prepare_output_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw ConfigError("output_dir: cannot create '" + dir + "'");
  const auto probe = std::filesystem::path(dir) / ".write_test";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("output_dir: '" + dir + "' is not writable");
  }
  std::filesystem::remove(probe, ec);
  return dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) { detail::write_file(p.string(), text); }

template <typename T>
TrainResult train_run(const RunConfig& rc, const Dataset& data, const std::filesystem::path& dir, std::size_t units) {
  std::ofstream metrics(dir / "metrics.csv", std::ios::trunc);
  if (!metrics) throw IoError("cannot open " + (dir / "metrics.csv").string());
  MetricsWriter writer(metrics, units, rc.metrics_every);
  TrainHooks hooks;
  hooks.on_step = [&](const MetricsRecord& r) { writer.write(r); };
  const std::size_t total = rc.train.schedule.total_epochs * steps_per_epoch(rc.train, data);
  hooks.on_checkpoint = [&](const Checkpoint& ck) {
    const auto name = ck.step == total ? std::string("checkpoint.bin") : "checkpoint_step" + std::to_string(ck.step) + ".bin";
    save_checkpoint((dir / name).string(), ck);
  };
  TrainResult r = train<T>(rc.train, data, hooks);
  metrics.flush();
  if (!metrics) throw IoError("metrics: write failed");
  return r;
}

inline int cmd_train(const std::string& config_path, const std::string& output_override, std::ostream& out) {
  RunConfig rc = load_config(config_path);
  if (!output_override.empty()) rc.output_dir = output_override;
  const auto dir = prepare_output_dir(rc.output_dir);
  const Dataset all = load_data(rc);
  const Dataset data = all.labels ? split_dataset(all, rc.test_holdout).first : all;
  write_text(dir / "config.json", serialize(rc));
  const std::size_t units = build_units(rc.train.arch, rc.train.topology).units.size();
  const TrainResult r = rc.train.precision == Precision::f32 ? train_run<float>(rc, data, dir, units)
                                                             : train_run<double>(rc, data, dir, units);
  json first = r.metrics.front().unit_losses, last = r.metrics.back().unit_losses;
  out << json{{"steps", r.checkpoint.step},
              {"units", units},
              {"train_images", data.count},
              {"first_losses", first},
              {"final_losses", last},
              {"checkpoint", (dir / "checkpoint.bin").string()},
              {"metrics", (dir / "metrics.csv").string()},
              {"fingerprint", hex(r.checkpoint.fingerprint)}}
             .dump(2)
      << '\n';
  return kExitOk;
}

inline int cmd_probe(const std::string& config_path, std::string checkpoint, std::string output, std::ostream& out) {
  const RunConfig rc = load_config(config_path);
  if (checkpoint.empty()) checkpoint = (std::filesystem::path(rc.output_dir) / "checkpoint.bin").string();
  if (output.empty()) output = (std::filesystem::path(rc.output_dir) / "probe.json").string();
  const Checkpoint ck = load_checkpoint(checkpoint, fingerprint(rc.train));
  const Dataset all = load_data(rc);
  const auto [train_set, test_set] = split_dataset(all, rc.test_holdout);
  const ProbeResult p = rc.train.precision == Precision::f32
                            ? linear_probe<float>(rc.train.arch, ck, train_set, test_set, rc.probe)
                            : linear_probe<double>(rc.train.arch, ck, train_set, test_set, rc.probe);
  const json j{{"accuracy", p.accuracy},
               {"chosen_lr", p.chosen_lr},
               {"lr_grid", rc.probe.lr_grid},
               {"validation_accuracy", p.validation_accuracy},
               {"train_images", train_set.count},
               {"test_images", test_set.count},
               {"checkpoint", checkpoint},
               {"step", ck.step}};
  write_text(output, j.dump(2) + "\n");
  out << j.dump(2) << '\n';
  return kExitOk;
}

struct MemoryArgs {
  std::string arch = "resnet50";
  std::size_t input_hw = 0;
  std::string topology = "gim";
  double overhead = 0;
  double fit_target = 0;
  std::string fit_topology = "gim";
  std::size_t batch = 1;
  double bytes = 4;
  std::string accounting = "blocks";
  bool include_decoder = false;
  std::string fractions;
};

inline int cmd_analyze_memory(const MemoryArgs& a, std::ostream& out) {
  std::optional<Hw> in;
  if (a.input_hw) in = Hw{a.input_hw, a.input_hw};
  const ArchitectureSpec arch = preset_arch(a.arch, in);
  const AccountingRule rule = parse_accounting(a.accounting);
  StageStats stats = stage_stats(arch, a.batch, a.bytes, rule);
  json j{{"arch", arch.name}, {"input_hw", {arch.input_hw[0], arch.input_hw[1]}}, {"accounting", to_string(rule)}};
  if (!a.fractions.empty()) {
    const auto fr = parse_list(a.fractions, "--fractions");
    if (fr.size() != stats.size()) {
      throw ConfigError("--fractions: " + std::to_string(fr.size()) + " values for " + std::to_string(stats.size()) +
                        " stages");
    }
    stats.activation_bytes = fr;
    for (std::size_t i = 0; i < fr.size(); ++i) stats.block_activation_bytes[i] = {fr[i]};
    j["activation_source"] = "fractions";
  } else {
    j["activation_source"] = "computed";
  }
  j["stats"] = stats_to_json(stats);
  const TopologySpec topo = build_units(arch, parse_topology(a.topology));
  MemoryModel model;
  model.batch = a.batch;
  model.bytes_per_element = a.bytes;
  model.overhead = a.overhead;
  if (a.fit_target > 0) {
    const TopologySpec fit_topo = build_units(arch, parse_topology(a.fit_topology));
    model.overhead = fit_overhead(stats, fit_topo, a.fit_target);
    j["fit"] = {{"topology", to_string(fit_topo.choice)}, {"target_ratio", a.fit_target}, {"overhead", model.overhead}};
  }
  std::vector<double> extra;
  if (a.include_decoder) {
    if (!a.fractions.empty()) throw ConfigError("--include-decoder needs computed activations, not --fractions");
    extra = unit_decoder_bytes(arch, topo, DecoderSpec{}, a.batch, a.bytes, rule);
  }
  const PeakReport p = peak_memory(stats, topo, model, extra);
  j["topology"] = to_string(topo.choice);
  j["overhead"] = model.overhead;
  j["include_decoder"] = a.include_decoder;
  j["peak"] = peak_to_json(p);
  j["ratio"] = p.ratio;
  out << j.dump(2) << '\n';
  return kExitOk;
}

struct SimArgs {
  std::size_t stages = 0;
  std::size_t micro = 1;
  std::string topology = "gim";
  std::string fwd, bwd;
  std::string arch;
  std::string timeline;
};

inline int cmd_simulate(const SimArgs& a, std::ostream& out) {
  std::vector<double> f, b;
  std::size_t S = a.stages;
  TopologySpec topo;
  if (!a.arch.empty()) {
    const ArchitectureSpec arch = preset_arch(a.arch);
    const StageStats s = stage_stats(arch);
    for (std::size_t i = 0; i < s.size(); ++i) {
      f.push_back(s.forward_flops[i] / 1e9);
      b.push_back(s.backward_flops[i] / 1e9);
    }
    if (S && S != s.size()) throw ConfigError("--stages disagrees with --arch stage count");
    S = s.size();
    topo = build_units(arch, parse_topology(a.topology));
  } else {
    if (S == 0) throw ConfigError("--stages: give a stage count or --arch");
    topo = build_units(S, parse_topology(a.topology));
  }
  if (!a.fwd.empty()) f = parse_list(a.fwd, "--fwd");
  if (!a.bwd.empty()) b = parse_list(a.bwd, "--bwd");
  if (f.empty()) f.assign(S, 1.0);
  if (b.empty()) b.assign(S, 1.0);
  if (f.size() != S || b.size() != S) throw ConfigError("--fwd/--bwd: need one cost per stage");
  const ScheduleReport r = simulate_parallel(f, b, topo, a.micro);
  if (!a.timeline.empty()) {
    std::ofstream csv(a.timeline, std::ios::trunc);
    if (!csv) throw IoError("cannot open " + a.timeline);
    write_timeline_csv(csv, r);
    if (!csv) throw IoError("timeline: write failed");
  }
  json j = schedule_to_json(r);
  j["topology"] = to_string(topo.choice);
  j["stages"] = S;
  j["microbatches"] = a.micro;
  j["forward_costs"] = f;
  j["backward_costs"] = b;
  out << j.dump(2) << '\n';
  return kExitOk;
}

struct GradArgs {
  std::string arch = "toy3";
  std::size_t input_hw = 16;
  std::string topology = "loco";
  double tolerance = 1e-4;
  double eps = 1e-5;
  std::size_t samples = 4;
  std::size_t views = 6;
  std::uint64_t seed = 0;
  bool skip_primitives = false;
};

inline int cmd_gradcheck(const GradArgs& a, std::ostream& out) {
  const ArchitectureSpec arch = preset_arch(a.arch, Hw{a.input_hw, a.input_hw});
  DecoderSpec dec;
  dec.projection_dim = 16;
  std::vector<SuiteRow> rows;
  if (!a.skip_primitives) rows = primitive_gradient_suite(a.seed, a.eps);
  for (auto& r : model_gradient_suite(arch, parse_topology(a.topology), dec, a.views, a.seed, a.samples, a.eps)) {
    r.name = arch.name + "/" + a.topology + "/" + r.name;
    rows.push_back(std::move(r));
  }
  bool ok = true;
  double worst = 0;
  out << std::left << std::setw(36) << "check" << std::setw(16) << "max_rel_error" << std::setw(10) << "checked"
      << "kinks_skipped\n";
  for (const auto& r : rows) {
    const bool pass = r.checked > 0 && r.max_rel_error < a.tolerance;
    ok = ok && pass;
    worst = std::max(worst, r.max_rel_error);
    std::ostringstream e;
    e << std::scientific << std::setprecision(3) << r.max_rel_error;
    out << std::setw(36) << r.name << std::setw(16) << e.str() << std::setw(10) << r.checked << r.skipped_kinks
        << (pass ? "" : "  FAIL") << '\n';
  }
  out << "max relative error " << std::scientific << std::setprecision(3) << worst << " (tolerance " << a.tolerance
      << "): " << (ok ? "PASS" : "FAIL") << '\n'
      << std::defaultfloat;
  return ok ? kExitOk : kExitCheckFailed;
}

inline int cmd_gen_data(const SyntheticConfig& s, const std::string& path, bool labels, std::ostream& out) {
  Dataset d = make_synthetic(s);
  if (!labels) d.labels.reset();
  const std::string bytes = encode_lcim(d);
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  detail::write_file(path, bytes);
  out << json{{"path", path},
              {"count", d.count},
              {"hw", s.hw},
              {"classes", s.classes},
              {"labels", labels},
              {"bytes", bytes.size()},
              {"sha256", hex(sha256(bytes))}}
             .dump(2)
      << '\n';
  return kExitOk;
}

}  // namespace cli

/// Parses arguments (without the program name) and runs one subcommand.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Local contrastive learning toolkit"};
  app.name("loco_cli");
  app.require_subcommand(1);

  std::string config, output, checkpoint;
  auto* train = app.add_subcommand("train", "Contrastive pretraining from a JSON config");
  train->add_option("--config", config, "Run config (JSON)")->required();
  train->add_option("--output", output, "Override output_dir");

  std::string probe_out;
  auto* probe = app.add_subcommand("probe", "Linear probe of a trained checkpoint");
  probe->add_option("--config", config, "Run config used for training")->required();
  probe->add_option("--checkpoint", checkpoint, "Checkpoint (default <output_dir>/checkpoint.bin)");
  probe->add_option("--output", probe_out, "Report path (default <output_dir>/probe.json)");

  cli::MemoryArgs mem;
  auto* am = app.add_subcommand("analyze-memory", "Per-stage memory/FLOPs and peak-memory ratios");
  am->add_option("--arch", mem.arch, "Architecture preset")->capture_default_str();
  am->add_option("--input-hw", mem.input_hw, "Square input size (default: preset's)");
  am->add_option("--topology", mem.topology, "Topology")->capture_default_str();
  am->add_option("--overhead", mem.overhead, "Overhead fraction o")->capture_default_str();
  am->add_option("--fit-target", mem.fit_target, "Fit o so --fit-topology reaches this ratio");
  am->add_option("--fit-topology", mem.fit_topology, "Topology used for fitting")->capture_default_str();
  am->add_option("--batch", mem.batch, "Batch size")->capture_default_str();
  am->add_option("--bytes", mem.bytes, "Bytes per element")->capture_default_str();
  am->add_option("--accounting", mem.accounting, "blocks | layers")->capture_default_str();
  am->add_flag("--include-decoder", mem.include_decoder, "Add per-unit decoder activations");
  am->add_option("--fractions", mem.fractions, "Comma-separated per-stage activation fractions");

  cli::SimArgs sim;
  auto* sp = app.add_subcommand("simulate-parallel", "Model-parallel schedule simulation");
  sp->add_option("--stages", sim.stages, "Number of stages/workers");
  sp->add_option("--micro", sim.micro, "Microbatches")->capture_default_str();
  sp->add_option("--topology", sim.topology, "Topology")->capture_default_str();
  sp->add_option("--fwd", sim.fwd, "Comma-separated forward costs (default 1 each)");
  sp->add_option("--bwd", sim.bwd, "Comma-separated backward costs (default 1 each)");
  sp->add_option("--arch", sim.arch, "Take costs from an architecture's FLOPs (GFLOPs)");
  sp->add_option("--timeline", sim.timeline, "Write the event timeline CSV here");

  cli::GradArgs grad;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--arch", grad.arch, "Architecture preset")->capture_default_str();
  gc->add_option("--input-hw", grad.input_hw, "Square input size")->capture_default_str();
  gc->add_option("--topology", grad.topology, "Topology")->capture_default_str();
  gc->add_option("--tolerance", grad.tolerance, "Maximum relative error")->capture_default_str();
  gc->add_option("--eps", grad.eps, "Finite-difference step")->capture_default_str();
  gc->add_option("--samples", grad.samples, "Sampled elements per parameter tensor")->capture_default_str();
  gc->add_option("--views", grad.views, "Views in the model batch")->capture_default_str();
  gc->add_option("--seed", grad.seed, "Seed")->capture_default_str();
  gc->add_flag("--skip-primitives", grad.skip_primitives, "Only check the model");

  SyntheticConfig syn;
  std::string data_out;
  bool no_labels = false;
  auto* gd = app.add_subcommand("gen-data", "Write a synthetic LCIM dataset");
  gd->add_option("--out", data_out, "Output file")->required();
  gd->add_option("--count", syn.count, "Images")->capture_default_str();
  gd->add_option("--hw", syn.hw, "Square image size")->capture_default_str();
  gd->add_option("--classes", syn.classes, "Classes")->capture_default_str();
  gd->add_option("--seed", syn.seed, "Seed")->capture_default_str();
  gd->add_flag("--no-labels", no_labels, "Omit labels");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*train) return cli::cmd_train(config, output, out);
    if (*probe) return cli::cmd_probe(config, checkpoint, probe_out, out);
    if (*am) return cli::cmd_analyze_memory(mem, out);
    if (*sp) return cli::cmd_simulate(sim, out);
    if (*gc) return cli::cmd_gradcheck(grad, out);
    if (*gd) return cli::cmd_gen_data(syn, data_out, !no_labels, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace loco
