#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "loco/trainer.hpp"

using namespace loco;
using Td = Tensor<double>;

namespace {

ScheduleConfig sched(double base, std::size_t warm, std::size_t total, std::size_t spe) {
  return ScheduleConfig{base, warm, total, spe};
}

TrainConfig tiny_config(const std::string& topology, std::size_t stages = 2) {
  TrainConfig c;
  c.arch = preset_arch("toy" + std::to_string(stages), Hw{16, 16});
  c.augment.output_hw = {16, 16};
  c.topology = parse_topology(topology);
  c.decoder.projection_dim = 16;
  c.decoder.temperature = 0.2;
  c.batch = 4;
  c.schedule = sched(0.5, 1, 2, 1);
  c.seed = 3;
  c.precision = Precision::f64;
  return c;
}

Dataset tiny_data(std::size_t count = 16, std::size_t hw = 16) {
  return make_synthetic(SyntheticConfig{count, hw, 10, 7});
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("loco_trainer_" + name);
}

}  // namespace

TEST(Schedule, Examples) {
  const auto s = sched(4.8, 10, 800, 100);
  EXPECT_NEAR(lr_at(s, 500), 2.4, 1e-12);
  EXPECT_NEAR(lr_at(s, 1000), 4.8, 1e-12);
  EXPECT_NEAR(lr_at(s, s.total_steps()), 0.0, 1e-12);
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_THROW(lr_at(s, s.total_steps() + 1), ConfigError);
}

TEST(Schedule, ContinuousAndNonIncreasingAfterWarmup) {
  const auto s = sched(1.5, 3, 20, 7);
  const std::size_t w = s.warmup_steps();
  EXPECT_NEAR(lr_at(s, w - 1), lr_at(s, w), 1.5 / static_cast<double>(w) + 1e-12);
  for (std::size_t t = w; t < s.total_steps(); ++t) EXPECT_LE(lr_at(s, t + 1), lr_at(s, t));
  for (std::size_t t = 0; t < w; ++t) EXPECT_LT(lr_at(s, t), lr_at(s, t + 1));
  EXPECT_NEAR(lr_at(sched(2, 0, 4, 1), 0), 2.0, 0);
  EXPECT_NEAR(lr_at(sched(2, 4, 4, 1), 4), 2.0, 0);
}

TEST(Schedule, Validation) {
  EXPECT_THROW(sched(1, 5, 4, 1).validate(), ConfigError);
  EXPECT_THROW(sched(0, 0, 4, 1).validate(), ConfigError);
  EXPECT_THROW(sched(1, 0, 0, 1).validate(), ConfigError);
}

TEST(Sgd, Examples) {
  Td w({3}, {1, -2, 3});
  sgd_step(w, Td::zeros({3}), 0.1, 0.0, 0.0);
  EXPECT_EQ(w, Td({3}, {1, -2, 3}));
  Td a = Td::scalar(1);
  sgd_step(a, Td::scalar(0.5), 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(a.item(), 0.95);
  Td b = Td::scalar(2);
  sgd_step(b, Td::scalar(0), 1.0, 0.0, 0.1);
  EXPECT_DOUBLE_EQ(b.item(), 1.8);
  EXPECT_THROW(sgd_step(b, Td({2}), 1.0, 0.0, 0.0), ShapeError);
}

TEST(Sgd, MomentumAccumulates) {
  Td w = Td::scalar(0), v;
  sgd_step(w, Td::scalar(1), 1.0, 0.5, 0.0, &v);
  sgd_step(w, Td::scalar(1), 1.0, 0.5, 0.0, &v);
  EXPECT_DOUBLE_EQ(v.item(), 1.5);
  EXPECT_DOUBLE_EQ(w.item(), -2.5);
}

TEST(Lars, Examples) {
  Td w({2}, {0.6, 0.8}), g({2}, {0.0, 1.0});
  Td w0 = w;
  lars_step(w, g, 1.0, 0.001, 0.0);
  EXPECT_NEAR(w[0] - w0[0], 0.0, 1e-15);
  EXPECT_NEAR(w[1] - w0[1], -0.001, 1e-12);
  Td z = w0;
  lars_step(z, Td::zeros({2}), 1.0, 0.001, 0.0);
  EXPECT_EQ(z, w0);
  EXPECT_THROW(lars_step(z, Td({3}), 1.0, 0.001, 0.0), ShapeError);
}

TEST(Lars, GradientScaleInvariance) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0, 1);
  Td w({7}), g({7});
  for (auto& v : w.storage()) v = n(rng);
  for (auto& v : g.storage()) v = n(rng);
  Td a = w, b = w, g10 = g;
  g10 *= 10.0;
  lars_step(a, g, 0.7, 0.01, 0.0);
  lars_step(b, g10, 0.7, 0.01, 0.0);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i] - w[i], b[i] - w[i], 1e-8 * std::abs(a[i] - w[i]));
}

TEST(Lars, ZeroWeightFallsBackToPlainScaling) {
  Td w = Td::zeros({2});
  lars_step(w, Td({2}, {1, 2}), 0.1, 0.001, 0.0);
  EXPECT_DOUBLE_EQ(w[0], -0.1);
  EXPECT_DOUBLE_EQ(w[1], -0.2);
}

TEST(OptimizerConfig, JsonRoundTripAndErrors) {
  OptimizerConfig o{OptimizerKind::sgd, 0.5, 1e-4, 2e-3};
  EXPECT_EQ(optimizer_from_json(optimizer_to_json(o)), o);
  EXPECT_THROW(optimizer_from_json(json{{"kind", "adam"}}), ConfigError);
  EXPECT_THROW(optimizer_from_json(json{{"momentum", 1.0}}), ConfigError);
  EXPECT_THROW(optimizer_from_json(json{{"momentun", 0.1}}), ConfigError);
  const auto s = sched(0.3, 2, 9, 1);
  EXPECT_EQ(schedule_from_json(schedule_to_json(s)), s);
}

TEST(Dataset, LcimRoundTrip) {
  const Dataset d = tiny_data(12, 8);
  const std::string bytes = encode_lcim(d);
  EXPECT_EQ(bytes.size(), 18u + 12u * 8 * 8 * 3 + 2u * 12);
  EXPECT_EQ(decode_lcim(bytes), d);
  Dataset unlabeled = d;
  unlabeled.labels.reset();
  EXPECT_EQ(decode_lcim(encode_lcim(unlabeled)), unlabeled);
  EXPECT_THROW(decode_lcim(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(decode_lcim(bytes + "x"), IoError);
  EXPECT_THROW(decode_lcim("LCIX" + bytes.substr(4)), IoError);
  const auto path = temp_path("data.lcim");
  write_lcim(path.string(), d);
  EXPECT_EQ(read_lcim(path.string()), d);
  std::filesystem::remove(path);
}

TEST(Dataset, SyntheticDeterministicAndBalanced) {
  const Dataset a = make_synthetic({200, 16, 10, 4});
  EXPECT_EQ(encode_lcim(a), encode_lcim(make_synthetic({200, 16, 10, 4})));
  EXPECT_NE(encode_lcim(a), encode_lcim(make_synthetic({200, 16, 10, 5})));
  std::vector<int> counts(10, 0);
  for (auto l : *a.labels) ++counts[l];
  for (int c : counts) EXPECT_EQ(c, 20);
  const auto [tr, te] = split_dataset(a);
  EXPECT_EQ(tr.count + te.count, 200u);
  std::vector<int> test_counts(10, 0);
  for (auto l : *te.labels) ++test_counts[l];
  for (int c : test_counts) EXPECT_EQ(c, 4);
  const Td img = a.image<double>(0);
  EXPECT_EQ(img.shape(), (Shape{3, 16, 16}));
  for (double v : img.storage()) EXPECT_TRUE(v >= -1 && v <= 1);
}

TEST(Checkpoint, RoundTripAndFingerprint) {
  Checkpoint ck;
  ck.tensors["s0.w"] = Td({2, 3}, {1, 2, 3, 4, 5, -6.25});
  ck.tensors["d0.b"] = Td::scalar(0.1);
  ck.step = 42;
  ck.fingerprint = sha256("config");
  const std::string bytes = encode_checkpoint(ck);
  EXPECT_EQ(bytes.substr(0, 4), "LOCO");
  EXPECT_EQ(decode_checkpoint(bytes), ck);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  const auto path = temp_path("ck.bin");
  save_checkpoint(path.string(), ck);
  EXPECT_EQ(load_checkpoint(path.string(), sha256("config")), ck);
  EXPECT_THROW(load_checkpoint(path.string(), sha256("other")), ConfigError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, FingerprintTracksConfig) {
  TrainConfig a = tiny_config("loco"), b = a;
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  b.seed += 1;
  EXPECT_NE(fingerprint(a), fingerprint(b));
  EXPECT_EQ(hex(sha256("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Metrics, HeaderOnceAndColumns) {
  std::ostringstream os;
  MetricsWriter w(os, 3);
  w.write({0, 0, 0.1, {1, 2, 3}, 0, 1});
  w.write({1, 0, 0.2, {1, 2, 3}, 0, 2});
  const std::string s = os.str();
  EXPECT_EQ(s.find("step,"), 0u);
  EXPECT_EQ(s.find("step,", 1), std::string::npos);
  EXPECT_EQ(s.substr(0, s.find('\n')), "step,epoch,lr,unit_0_loss,unit_1_loss,unit_2_loss,penalty,wall_ms");
  EXPECT_EQ(MetricsWriter::header(1), "step,epoch,lr,unit_0_loss,penalty,wall_ms");
  EXPECT_THROW(w.write({2, 0, 0.2, {1}, 0, 2}), ShapeError);
}

TEST(Train, DeterministicCheckpointsAndMetrics) {
  const Dataset d = tiny_data();
  for (const char* topo : {"loco", "soft_share(0.01)"}) {
    TrainConfig c = tiny_config(topo, 3);
    c.precision = Precision::f32;
    const auto a = train<float>(c, d), b = train<float>(c, d);
    EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
    ASSERT_EQ(a.metrics.size(), 8u);
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
      EXPECT_EQ(a.metrics[i].unit_losses, b.metrics[i].unit_losses);
      EXPECT_EQ(a.metrics[i].lr, b.metrics[i].lr);
    }
    EXPECT_EQ(a.checkpoint.step, 8u);
    EXPECT_EQ(a.metrics.front().unit_losses.size(), 2u);
  }
}

TEST(Train, E2eMatchesSingleUnitLocoTrajectory) {
  const Dataset d = tiny_data();
  const auto e = train<double>(tiny_config("e2e"), d);
  const auto l = train<double>(tiny_config("loco"), d);
  EXPECT_EQ(e.checkpoint.tensors, l.checkpoint.tensors);
  for (std::size_t i = 0; i < e.metrics.size(); ++i) EXPECT_EQ(e.metrics[i].unit_losses, l.metrics[i].unit_losses);
}

TEST(Train, CheckpointCadenceAndViews) {
  const Dataset d = tiny_data();
  TrainConfig c = tiny_config("gim");
  c.checkpoint_every = 3;
  std::vector<std::uint64_t> steps;
  TrainHooks h;
  h.on_checkpoint = [&](const Checkpoint& ck) { steps.push_back(ck.step); };
  const auto r = train<double>(c, d, h);
  EXPECT_EQ(steps, (std::vector<std::uint64_t>{3, 6, 8}));
  EXPECT_EQ(r.checkpoint.fingerprint, [&] {
    TrainConfig f = c;
    f.schedule.steps_per_epoch = 4;
    return fingerprint(f);
  }());
  // 2N views per step: the model is built for twice the number of sources.
  LocalModel<double> m(c.arch, build_units(c.arch, c.topology), c.decoder, 2 * c.batch, c.seed);
  EXPECT_EQ(m.views(), 8u);
}

TEST(Train, Errors) {
  TrainConfig c = tiny_config("loco");
  c.batch = 3;
  EXPECT_THROW(train<double>(c, tiny_data()), ConfigError);
  c.batch = 32;
  EXPECT_THROW(train<double>(c, tiny_data()), ConfigError);
  c = tiny_config("loco");
  c.schedule.base_lr = 1e30;
  c.optimizer.kind = OptimizerKind::sgd;
  EXPECT_THROW(train<double>(c, tiny_data()), NumericError);
}

TEST(Train, LossesDecreaseOnSyntheticData) {
  const Dataset d = make_synthetic({256, 16, 10, 1});
  TrainConfig c = tiny_config("loco", 3);
  c.precision = Precision::f32;
  c.batch = 32;
  c.schedule = sched(1.0, 1, 8, 1);
  const auto r = train<float>(c, d);
  const std::size_t n = r.metrics.size(), w = 8;
  for (std::size_t u = 0; u < 2; ++u) {
    double first = 0, last = 0;
    for (std::size_t i = 0; i < w; ++i) {
      first += r.metrics[i].unit_losses[u];
      last += r.metrics[n - 1 - i].unit_losses[u];
    }
    EXPECT_LT(last, first) << "unit " << u;
  }
}

TEST(Probe, OneHotFeaturesAreSeparable) {
  std::vector<std::size_t> ytr, yte;
  Matrix xtr = Matrix::Zero(200, 10), xte = Matrix::Zero(50, 10);
  for (Eigen::Index i = 0; i < 200; ++i) {
    ytr.push_back(static_cast<std::size_t>(i % 10));
    xtr(i, i % 10) = 1;
  }
  for (Eigen::Index i = 0; i < 50; ++i) {
    yte.push_back(static_cast<std::size_t>((i * 7) % 10));
    xte(i, (i * 7) % 10) = 1;
  }
  EXPECT_DOUBLE_EQ(probe_features(xtr, ytr, xte, yte, ProbeConfig{}).accuracy, 1.0);
}

TEST(Probe, ShuffledLabelsGiveChance) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 1);
  double total = 0;
  const int trials = 8;
  for (int t = 0; t < trials; ++t) {
    Matrix xtr(500, 16), xte(500, 16);
    for (Eigen::Index i = 0; i < xtr.size(); ++i) xtr.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < xte.size(); ++i) xte.data()[i] = n(rng);
    std::vector<std::size_t> ytr, yte;
    for (std::size_t i = 0; i < 500; ++i) {
      ytr.push_back(i % 10);
      yte.push_back(i % 10);
    }
    std::shuffle(ytr.begin(), ytr.end(), rng);
    std::shuffle(yte.begin(), yte.end(), rng);
    ProbeConfig cfg;
    cfg.epochs = 10;
    total += probe_features(xtr, ytr, xte, yte, cfg).accuracy;
  }
  EXPECT_NEAR(total / trials, 0.1, 0.05);
}

TEST(Probe, SingleClassRejected) {
  Matrix x = Matrix::Ones(10, 2);
  EXPECT_THROW(probe_features(x, std::vector<std::size_t>(10, 3), x, std::vector<std::size_t>(10, 3), {}), ConfigError);
}

TEST(Probe, EncoderBitsUntouched) {
  const Dataset d = tiny_data(100);
  TrainConfig c = tiny_config("loco");
  const auto r = train<double>(c, tiny_data());
  const Digest before = sha256(encode_checkpoint(r.checkpoint));
  const auto [tr, te] = split_dataset(d);
  ProbeConfig pc;
  pc.epochs = 3;
  const ProbeResult p = linear_probe(c.arch, r.checkpoint, tr, te, pc);
  EXPECT_GE(p.accuracy, 0.0);
  EXPECT_LE(p.accuracy, 1.0);
  EXPECT_EQ(sha256(encode_checkpoint(r.checkpoint)), before);
  EXPECT_EQ(p.validation_accuracy.size(), pc.lr_grid.size());
}

TEST(Probe, SoftShareReplicasAverageIntoEncoder) {
  State<double> s;
  s["s1.w"] = Td::scalar(1);
  s["u0.s1.w"] = Td::scalar(3);
  s["d0.fc0.w"] = Td::scalar(9);
  const auto m = merge_encoder_state(s);
  EXPECT_EQ(m.size(), 1u);
  EXPECT_DOUBLE_EQ(m.at("s1.w").item(), 2.0);
}
