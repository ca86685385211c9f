#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "loco/cli.hpp"

using namespace loco;
namespace fs = std::filesystem;

namespace {

struct Out {
  int code;
  std::string out, err;
};

Out run(const std::vector<std::string>& args) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  return {code, o.str(), e.str()};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("loco_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return detail::read_file(p.string()); }

void put(const fs::path& p, const std::string& s) { detail::write_file(p.string(), s); }

/// Metrics CSV without the trailing wall-clock column.
std::string without_wall(const std::string& csv) {
  std::istringstream is(csv);
  std::string line, out;
  while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

std::string tiny_config(const fs::path& dir, const std::string& topology) {
  return json{{"arch", "toy3"},
              {"input_hw", 16},
              {"topology", topology},
              {"batch", 8},
              {"schedule", {{"base_lr", 0.5}, {"warmup_epochs", 0}, {"total_epochs", 2}}},
              {"checkpoint_every", 5},
              {"metrics_every", 3},
              {"output_dir", dir.string()},
              {"data", {{"synthetic", {{"count", 100}, {"hw", 16}, {"seed", 4}}}}},
              {"probe", {{"epochs", 5}, {"lr_grid", {1.0, 3.0}}}}}
      .dump(2);
}

}  // namespace

TEST(Config, MinimalGetsDefaults) {
  const RunConfig c = parse_config(R"({"arch": "toy3", "topology": "loco"})", "t", false);
  EXPECT_DOUBLE_EQ(c.train.decoder.temperature, 0.1);
  EXPECT_EQ(c.train.batch, 128u);
  EXPECT_EQ(c.train.topology.mode, TopologyMode::loco);
  EXPECT_EQ(c.train.arch.input_hw, (Hw{32, 32}));
  EXPECT_EQ(c.train.augment.output_hw, c.train.arch.input_hw);
  ASSERT_TRUE(c.data.synthetic.has_value());
  EXPECT_EQ(c.data.synthetic->hw, 32u);
}

TEST(Config, PresetSizedFromAugment) {
  const RunConfig c = parse_config(R"({"arch": "toy3", "augment": {"output_hw": 16}})", "t", false);
  EXPECT_EQ(c.train.arch.input_hw, (Hw{16, 16}));
}

TEST(Config, SingleStageLocoCollapses) {
  const RunConfig c = parse_config(R"({"arch": "toy1", "topology": "loco"})", "t", false);
  EXPECT_EQ(build_units(c.train.arch, c.train.topology).units.size(), 1u);
}

TEST(Config, UnknownKeySuggestion) {
  try {
    parse_config(R"({"arch": "toy3", "topolgy": "loco"})", "t", false);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("did you mean 'topology'"), std::string::npos) << e.what();
  }
}

TEST(Config, ParseErrorHasLine) {
  try {
    parse_config("{\n  \"arch\": \"toy3\",\n  \"batch\": ,\n}", "cfg.json", false);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cfg.json:3:"), std::string::npos) << e.what();
  }
}

TEST(Config, ConstraintNamesField) {
  try {
    parse_config(R"({"arch": "toy3", "batch": 2})", "t", false);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
  }
  EXPECT_THROW(parse_config(R"({"arch": "toy3", "data": {}})", "t", false), ConfigError);
  EXPECT_THROW(parse_config(R"({"arch": "toy3", "data": {"path": "x", "synthetic": {}}})", "t", false), ConfigError);
  EXPECT_THROW(parse_config(R"({"topology": "loco"})", "t", false), ConfigError);
  EXPECT_THROW(parse_config(R"({"arch": "toy3", "precision": "f16"})", "t", false), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json", false), ConfigError);
}

TEST(Config, SerializeRoundTripIsIdentity) {
  for (const char* text :
       {R"({"arch": "toy3"})",
        R"j({"arch": "toy4", "input_hw": 16, "topology": "soft_share(0.25)", "seed": 9, "precision": "f64",
            "decoder": {"conv_blocks": 0, "temperature": 0.3}, "optimizer": {"kind": "sgd"},
            "data": {"path": "x.lcim"}, "probe": {"epochs": 3}})j",
        R"j({"arch": "resnet50", "input_hw": 64, "topology": "share_blocks(2)"})j"}) {
    const RunConfig c = parse_config(text, "t", false);
    const RunConfig d = parse_config(serialize(c), "t", false);
    EXPECT_EQ(c, d) << text;
    EXPECT_EQ(serialize(c), serialize(d));
  }
}

TEST(Config, SamplesLoad) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(LOCO_SAMPLES_DIR)) {
    if (e.path().extension() != ".json") continue;
    const RunConfig c = load_config(e.path().string(), false);
    EXPECT_EQ(parse_config(serialize(c), "t", false), c) << e.path();
    ++n;
  }
  EXPECT_GE(n, 5u);
}

TEST(Config, SeedEnvironmentOverride) {
  ::setenv("LOCO_SEED", "77", 1);
  EXPECT_EQ(parse_config(R"({"arch": "toy3", "seed": 1})").train.seed, 77u);
  ::setenv("LOCO_SEED", "abc", 1);
  EXPECT_THROW(parse_config(R"({"arch": "toy3"})"), ConfigError);
  ::unsetenv("LOCO_SEED");
  EXPECT_EQ(parse_config(R"({"arch": "toy3", "seed": 1})").train.seed, 1u);
}

TEST(Cli, AnalyzeMemoryResnetGim) {
  const Out r = run({"analyze-memory", "--arch", "resnet50", "--topology", "gim", "--overhead", "0"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_NEAR(j["ratio"].get<double>(), 2.29, 0.01);
  EXPECT_NEAR(j["stats"]["total_forward_flops"].get<double>() / 4.14e9, 1, 0.05);
}

TEST(Cli, AnalyzeMemoryFitFromFractions) {
  const Out r = run({"analyze-memory", "--arch", "resnet50", "--topology", "loco", "--fractions",
                     "0.4364,0.2909,0.2182,0.0545", "--fit-target", "1.81"});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(r.out);
  EXPECT_NEAR(j["fit"]["overhead"].get<double>(), 0.2594, 1e-4);
  EXPECT_NEAR(j["ratio"].get<double>(), 1.276, 1e-3);
}

TEST(Cli, AnalyzeMemoryDecoderFlag) {
  const Out base = run({"analyze-memory", "--arch", "resnet50", "--topology", "gim"});
  const Out dec = run({"analyze-memory", "--arch", "resnet50", "--topology", "gim", "--include-decoder"});
  ASSERT_EQ(dec.code, 0) << dec.err;
  EXPECT_LT(json::parse(dec.out)["ratio"].get<double>(), json::parse(base.out)["ratio"].get<double>());
}

TEST(Cli, SimulateParallel) {
  const fs::path dir = temp_dir("sim");
  const Out r = run({"simulate-parallel", "--stages", "2", "--micro", "1", "--topology", "gim", "--timeline",
                     (dir / "t.csv").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["makespan"], 3.0);
  EXPECT_EQ(slurp(dir / "t.csv"), "event,worker,t_start,t_end\nF0,0,0,1\nB0,0,1,2\nF0,1,1,2\nB0,1,2,3\n");
  EXPECT_EQ(json::parse(run({"simulate-parallel", "--stages", "2", "--topology", "e2e"}).out)["makespan"], 4.0);
  EXPECT_EQ(run({"simulate-parallel", "--arch", "resnet50", "--micro", "4"}).code, 0);
  EXPECT_EQ(run({"simulate-parallel", "--stages", "2", "--fwd", "1,2,3"}).code, kExitConfig);
  EXPECT_EQ(run({"simulate-parallel", "--stages", "2", "--micro", "0"}).code, kExitConfig);
}

TEST(Cli, GradcheckToyLoco) {
  const Out r = run({"gradcheck", "--arch", "toy3", "--topology", "loco"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  EXPECT_NE(r.out.find("info_nce"), std::string::npos);
  EXPECT_NE(r.out.find("toy3/loco/unit1"), std::string::npos);
}

TEST(Cli, GradcheckFailsAtImpossibleTolerance) {
  const Out r = run({"gradcheck", "--arch", "toy2", "--topology", "gim", "--skip-primitives", "--tolerance", "1e-300"});
  EXPECT_EQ(r.code, kExitCheckFailed);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, GenDataDeterministic) {
  const fs::path dir = temp_dir("gen");
  const std::vector<std::string> base{"gen-data", "--count", "30", "--hw", "8", "--seed", "5", "--out"};
  auto a = base, b = base;
  a.push_back((dir / "a.lcim").string());
  b.push_back((dir / "b.lcim").string());
  ASSERT_EQ(run(a).code, 0);
  ASSERT_EQ(run(b).code, 0);
  EXPECT_EQ(slurp(dir / "a.lcim"), slurp(dir / "b.lcim"));
  const Dataset d = read_lcim((dir / "a.lcim").string());
  EXPECT_EQ(d.count, 30u);
  EXPECT_TRUE(d.labels.has_value());
  auto c = base;
  c.push_back((dir / "c.lcim").string());
  c.push_back("--no-labels");
  ASSERT_EQ(run(c).code, 0);
  EXPECT_FALSE(read_lcim((dir / "c.lcim").string()).labels.has_value());
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"fly"}).code, kExitConfig);
  EXPECT_EQ(run({"analyze-memory", "--arch", "vgg"}).code, kExitConfig);
  EXPECT_EQ(run({"analyze-memory", "--topology", "loko"}).code, kExitConfig);
  EXPECT_EQ(run({"train", "--config", "/nonexistent.json"}).code, kExitConfig);
  EXPECT_EQ(run({"--help"}).code, 0);
  const fs::path dir = temp_dir("codes");
  put(dir / "bad.json", R"({"arch": "toy3", "topolgy": "gim"})");
  const Out bad = run({"train", "--config", (dir / "bad.json").string()});
  EXPECT_EQ(bad.code, kExitConfig);
  EXPECT_NE(bad.err.find("topology"), std::string::npos);
  put(dir / "ok.json", tiny_config(dir / "run", "gim"));
  EXPECT_EQ(run({"probe", "--config", (dir / "ok.json").string(), "--checkpoint", (dir / "missing.bin").string()}).code,
            kExitRuntime);
  put(dir / "missing_data.json",
      json{{"arch", "toy3"}, {"output_dir", (dir / "r2").string()}, {"data", {{"path", (dir / "none.lcim").string()}}}}
          .dump());
  EXPECT_EQ(run({"train", "--config", (dir / "missing_data.json").string()}).code, kExitRuntime);
}

TEST(Cli, TrainProbeEndToEndAndDeterminism) {
  const fs::path dir = temp_dir("train");
  std::vector<std::string> metrics, checkpoints;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path out = dir / ("run" + std::to_string(rep));
    put(dir / "cfg.json", tiny_config(out, "loco"));
    const Out t = run({"train", "--config", (dir / "cfg.json").string()});
    ASSERT_EQ(t.code, 0) << t.err;
    const std::string csv = slurp(out / "metrics.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,epoch,lr,unit_0_loss,unit_1_loss,penalty,wall_ms");
    EXPECT_TRUE(fs::exists(out / "checkpoint_step5.bin"));
    EXPECT_TRUE(fs::exists(out / "config.json"));
    metrics.push_back(without_wall(csv));
    checkpoints.push_back(slurp(out / "checkpoint.bin"));
    const Out p = run({"probe", "--config", (dir / "cfg.json").string()});
    ASSERT_EQ(p.code, 0) << p.err;
    const json pj = json::parse(slurp(out / "probe.json"));
    EXPECT_GE(pj["accuracy"].get<double>(), 0.0);
    EXPECT_LE(pj["accuracy"].get<double>(), 1.0);
    EXPECT_EQ(pj["test_images"], 20);
  }
  EXPECT_EQ(metrics[0], metrics[1]);
  // The fingerprint covers the training config, not output_dir.
  EXPECT_EQ(checkpoints[0], checkpoints[1]);
}

TEST(Cli, E2eCurvesHaveOneLossColumn) {
  const fs::path dir = temp_dir("e2e");
  put(dir / "cfg.json", tiny_config(dir / "run", "e2e"));
  ASSERT_EQ(run({"train", "--config", (dir / "cfg.json").string()}).code, 0);
  const std::string csv = slurp(dir / "run" / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,epoch,lr,unit_0_loss,penalty,wall_ms");
}

TEST(Cli, ProbeRejectsForeignCheckpoint) {
  const fs::path dir = temp_dir("foreign");
  put(dir / "a.json", tiny_config(dir / "a", "gim"));
  ASSERT_EQ(run({"train", "--config", (dir / "a.json").string()}).code, 0);
  put(dir / "b.json", tiny_config(dir / "b", "loco"));
  const Out r = run({"probe", "--config", (dir / "b.json").string(), "--checkpoint", (dir / "a" / "checkpoint.bin").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("fingerprint"), std::string::npos);
}

TEST(Cli, BinaryRuns) {
  const std::string cmd = std::string(LOCO_CLI_PATH) + " simulate-parallel --stages 2 --micro 1 --topology gim > /dev/null";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  const std::string bad = std::string(LOCO_CLI_PATH) + " analyze-memory --arch nope 2> /dev/null";
  const int status = std::system(bad.c_str());
  EXPECT_EQ(WEXITSTATUS(status), kExitConfig);
}
