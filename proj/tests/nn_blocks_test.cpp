#include <gtest/gtest.h>

#include <random>

#include "loco/encoder.hpp"
#include "loco/gradcheck.hpp"

using namespace loco;
using Td = Tensor<double>;

namespace {

Td random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Td t(s);
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

// Direct sliding-window cross-correlation.
Td naive_conv(const Td& x, const Td& w, const ConvSpec& s) {
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  std::size_t ho = 0, wo = 0;
  for (std::size_t oy = 0; oy * s.stride[0] + s.kernel[0] <= h + 2 * s.padding[0]; ++oy) ho = oy + 1;
  for (std::size_t ox = 0; ox * s.stride[1] + s.kernel[1] <= wd + 2 * s.padding[1]; ++ox) wo = ox + 1;
  const std::size_t cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  Td out({n, s.out_channels, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      const std::size_t grp = o / cout_g;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < cin_g; ++c)
            for (std::size_t ky = 0; ky < s.kernel[0]; ++ky)
              for (std::size_t kx = 0; kx < s.kernel[1]; ++kx) {
                const long iy = static_cast<long>(oy * s.stride[0] + ky) - static_cast<long>(s.padding[0]);
                const long ix = static_cast<long>(ox * s.stride[1] + kx) - static_cast<long>(s.padding[1]);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x.at({b, grp * cin_g + c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)}) *
                       w.at({o, c, ky, kx});
              }
          out.at({b, o, oy, ox}) = acc;
        }
    }
  return out;
}

}  // namespace

TEST(Conv2d, PointwiseIdentity) {
  const ConvSpec s{1, 1, {1, 1}, {1, 1}, {0, 0}, 1};
  std::mt19937_64 rng(1);
  const Td x = random_tensor({1, 1, 5, 4}, rng);
  EXPECT_EQ(conv2d(x, s, Td({1, 1, 1, 1}, 1.0)), x);
}

TEST(Conv2d, AllOnesThreeByThree) {
  const ConvSpec s{1, 1, {3, 3}, {1, 1}, {1, 1}, 1};
  const Td y = conv2d(Td({1, 1, 4, 4}, 1.0), s, Td({1, 1, 3, 3}, 1.0));
  EXPECT_EQ(y.at({0, 0, 1, 1}), 9);
  EXPECT_EQ(y.at({0, 0, 2, 2}), 9);
  EXPECT_EQ(y.at({0, 0, 0, 0}), 4);
  EXPECT_EQ(y.at({0, 0, 3, 3}), 4);
  EXPECT_EQ(y.at({0, 0, 0, 1}), 6);
}

TEST(Conv2d, GroupIndependence) {
  const ConvSpec s{4, 4, {3, 3}, {1, 1}, {1, 1}, 2};
  std::mt19937_64 rng(2);
  Td x = random_tensor({1, 4, 5, 5}, rng);
  const Td w = random_tensor(s.weight_shape(), rng);
  const Td before = conv2d(x, s, w);
  for (std::size_t c = 2; c < 4; ++c)
    for (std::size_t i = 0; i < 25; ++i) x[c * 25 + i] = 0;
  const Td after = conv2d(x, s, w);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(before[o * 25 + i], after[o * 25 + i]);
}

TEST(Conv2d, Errors) {
  EXPECT_THROW((ConvSpec{3, 4, {3, 3}, {1, 1}, {1, 1}, 2}.validate()), ConfigError);
  const ConvSpec s{2, 2, {3, 3}, {1, 1}, {1, 1}, 1};
  EXPECT_THROW(conv2d(Td({1, 3, 4, 4}), s, Td(s.weight_shape())), ShapeError);
  EXPECT_THROW(conv2d(Td({1, 2, 4, 4}), s, Td({2, 2, 1, 1})), ShapeError);
}

TEST(Conv2d, MatchesNaiveOracleOnRandomCases) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t groups = 1 + rng() % 3;
    const std::size_t cin = groups * (1 + rng() % 2), cout = groups * (1 + rng() % 3);
    const std::size_t k = 1 + rng() % 3, stride = 1 + rng() % 2, pad = rng() % 2;
    const std::size_t h = k + rng() % 6, w = k + rng() % 6;
    const ConvSpec s{cin, cout, {k, k}, {stride, stride}, {pad, pad}, groups};
    const Td x = random_tensor({2, cin, h, w}, rng);
    const Td wt = random_tensor(s.weight_shape(), rng);
    const Td fast = conv2d(x, s, wt);
    const Td ref = naive_conv(x, wt, s);
    ASSERT_EQ(fast.shape(), ref.shape());
    EXPECT_EQ(fast.dim(2), (h + 2 * pad - k) / stride + 1);
    EXPECT_LT(max_abs_diff(fast, ref), 1e-12);
  }
}

TEST(Conv2d, GroupedEqualsPerGroupUngrouped) {
  std::mt19937_64 rng(4);
  const ConvSpec s{4, 6, {3, 3}, {1, 1}, {1, 1}, 2};
  const ConvSpec half{2, 3, {3, 3}, {1, 1}, {1, 1}, 1};
  const Td x = random_tensor({2, 4, 6, 6}, rng);
  const Td w = random_tensor(s.weight_shape(), rng);
  const Td y = conv2d(x, s, w);
  for (std::size_t grp = 0; grp < 2; ++grp) {
    Td xg({2, 2, 6, 6}), wg(half.weight_shape());
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 72; ++i) xg[b * 72 + i] = x[b * 144 + grp * 72 + i];
    for (std::size_t i = 0; i < wg.size(); ++i) wg[i] = w[grp * wg.size() + i];
    const Td yg = conv2d(xg, half, wg);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 108; ++i) EXPECT_EQ(yg[b * 108 + i], y[b * 216 + grp * 108 + i]);
  }
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  RunningStats<double> st(2);
  const auto r = batch_norm(Td({3, 2, 2, 2}, 4.0), Td({2}, {2.0, -3.0}), Td({2}, 0.5), NormMode::train, 1e-5, st);
  for (double v : r.output.storage()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(BatchNorm, PlusMinusOne) {
  RunningStats<double> st(1);
  const auto r = batch_norm(Td({2, 1}, {-1, 1}), Td({1}, 1.0), Td({1}, 0.0), NormMode::train, 1e-14, st);
  EXPECT_NEAR(r.output[0], -1, 1e-12);
  EXPECT_NEAR(r.output[1], 1, 1e-12);
}

TEST(BatchNorm, EvalIsAffineWithUnitStats) {
  RunningStats<double> st(2);
  std::mt19937_64 rng(5);
  const Td x = random_tensor({2, 2, 3, 3}, rng);
  const Td gamma({2}, {1.5, -0.5}), beta({2}, {0.25, 2});
  const auto r = batch_norm(x, gamma, beta, NormMode::eval, 0.0, st);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / 9) % 2;
    EXPECT_EQ(r.output[i], gamma[c] * x[i] + beta[c]);
  }
  EXPECT_EQ(st.mean, Td({2}, 0.0));
  EXPECT_EQ(st.var, Td({2}, 1.0));
}

TEST(BatchNorm, TrainUpdatesRunningStats) {
  RunningStats<double> st(1);
  batch_norm(Td({4, 1}, {1, 2, 3, 4}), Td({1}, 1.0), Td({1}, 0.0), NormMode::train, 1e-5, st, 0.1);
  EXPECT_NEAR(st.mean[0], 0.25, 1e-12);
  EXPECT_NEAR(st.var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);
}

TEST(BatchNorm, DegenerateSingleSampleWarns) {
  RunningStats<double> st(1);
  const auto r = batch_norm(Td({1, 1, 1, 1}, 3.0), Td({1}, 1.0), Td({1}, 0.0), NormMode::train, 1e-5, st);
  EXPECT_TRUE(r.degenerate);
  EXPECT_TRUE(r.output.all_finite());

  Graph<double> g;
  const NodeId x = g.input("x", {1, 1, 1, 1});
  ops::batch_norm(g, x, g.parameter("gm", Td({1}, 1.0)), g.parameter("bt", Td({1}, 0.0)), "bn");
  g.bind(x, Td({1, 1, 1, 1}, 3.0));
  g.forward();
  ASSERT_EQ(g.warnings().size(), 1u);
  EXPECT_NE(g.warnings()[0].find("degenerate"), std::string::npos);
}

TEST(BatchNorm, ParameterLengthMismatch) {
  RunningStats<double> st(2);
  EXPECT_THROW(batch_norm(Td({2, 2}), Td({3}, 1.0), Td({2}), NormMode::train, 1e-5, st), ShapeError);
}

TEST(Bilinear, SameSizeIsIdentity) {
  std::mt19937_64 rng(6);
  const Td x = random_tensor({2, 3, 5, 7}, rng);
  EXPECT_EQ(bilinear_resize(x, Hw{5, 7}), x);
}

TEST(Bilinear, TwoByTwoToOne) {
  EXPECT_DOUBLE_EQ(bilinear_resize(Td({1, 1, 2, 2}, {1, 2, 3, 4}), Hw{1, 1}).item(), 2.5);
}

TEST(Bilinear, ProgressiveScheduleShape) {
  EXPECT_EQ(bilinear_resize(Td({1, 2, 56, 56}), Hw{36, 36}).shape(), (Shape{1, 2, 36, 36}));
}

TEST(Bilinear, PreservesConstants) {
  for (Hw out : {Hw{1, 1}, Hw{3, 5}, Hw{9, 2}, Hw{17, 13}}) {
    const Td y = bilinear_resize(Td({1, 2, 6, 7}, -1.25), out);
    for (double v : y.storage()) EXPECT_DOUBLE_EQ(v, -1.25);
  }
}

TEST(Bilinear, Errors) { EXPECT_THROW(bilinear_resize(Td({1, 1, 2, 2}), Hw{0, 1}), ShapeError); }

TEST(GlobalAvgPool, Examples) {
  EXPECT_DOUBLE_EQ(global_avg_pool(Td({1, 1, 2, 2}, {1, 3, 5, 7})).item(), 4.0);
  EXPECT_DOUBLE_EQ(global_avg_pool(Td({1, 1, 3, 3}, 2.5)).item(), 2.5);
  const Td two({1, 2, 2, 2}, {0, 1, 0, 0, -1, -1, -2, 0});
  EXPECT_EQ(global_avg_pool(two), Td({1, 2}, {0.25, -1}));
}

TEST(MaxPool, WindowMaximum) {
  const Td x({1, 1, 4, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  const Td y = max_pool2d(x, PoolSpec{3, 2, 1});
  EXPECT_EQ(y, Td({1, 1, 2, 2}, {6, 8, 14, 16}));
}

TEST(Presets, ResNet50StageNames) {
  const auto a = preset_arch("resnet50");
  ASSERT_EQ(a.num_stages(), 4u);
  EXPECT_EQ(a.stages[0].name, "conv1+res2");
  EXPECT_EQ(a.stages[1].name, "res3");
  EXPECT_EQ(a.stages[2].name, "res4");
  EXPECT_EQ(a.stages[3].name, "res5");
  EXPECT_EQ(a.blocks_per_stage(), (std::vector<std::size_t>{3, 4, 6, 3}));
}

TEST(Presets, PResNet50Structure) {
  const auto a = preset_arch("presnet50");
  ASSERT_EQ(a.num_stages(), 6u);
  const std::size_t base[] = {56, 96, 144, 256, 512, 1024};
  const std::size_t res[] = {56, 36, 24, 16, 12, 8};
  const std::size_t groups[] = {1, 1, 1, 2, 16, 128};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.stages[i].base_channels, base[i]);
    EXPECT_EQ(a.stages[i].output_hw, (Hw{res[i], res[i]}));
    std::size_t gmax = 1;
    for (const auto& b : a.stages[i].blocks)
      for (const auto& c : b.convs) gmax = std::max(gmax, c.groups);
    EXPECT_EQ(gmax, groups[i]);
  }
  EXPECT_EQ(a.stem.conv, (ConvSpec{3, 32, {7, 7}, {2, 2}, {3, 3}, 1}));
  EXPECT_EQ(a.stages[1].blocks[0].downsample.kind, Downsample::Kind::bilinear);
}

TEST(Presets, ToyThree) {
  const auto a = preset_arch("toy(3)");
  ASSERT_EQ(a.num_stages(), 3u);
  const std::size_t ch[] = {8, 16, 32};
  const auto rs = resolve(a);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.stages[i].blocks.size(), 1u);
    EXPECT_EQ(rs[i].out_channels, ch[i]);
  }
  EXPECT_EQ(preset_arch("toy3"), a);
}

TEST(Presets, Unknown) {
  EXPECT_THROW(preset_arch("vgg16"), ConfigError);
  EXPECT_THROW(preset_arch("toy0"), ConfigError);
}

TEST(Encoder, ToyTwoBoundariesShrink) {
  Encoder<double> enc(preset_arch("toy2", Hw{16, 16}), 1);
  std::mt19937_64 rng(7);
  const auto b = enc.forward(random_tensor({1, 3, 16, 16}, rng));
  ASSERT_EQ(b.size(), 2u);
  EXPECT_GT(b[0].dim(2), b[1].dim(2));
  EXPECT_GT(b[0].dim(3), b[1].dim(3));
}

TEST(Encoder, ResNet50BoundaryChannels) {
  const auto rs = resolve(preset_arch("resnet50"));
  const std::size_t ch[] = {256, 512, 1024, 2048};
  const std::size_t hw[] = {56, 28, 14, 7};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rs[i].out_channels, ch[i]);
    EXPECT_EQ(rs[i].out_hw, (Hw{hw[i], hw[i]}));
  }
  Encoder<float> enc(preset_arch("resnet50", Hw{32, 32}));
  const auto shapes = enc.boundary_shapes(2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(shapes[i][1], ch[i]);
}

TEST(Encoder, PResNet50FinalBoundary) {
  const auto rs = resolve(preset_arch("presnet50"));
  EXPECT_EQ(rs.back().out_channels, 4096u);
  EXPECT_EQ(rs.back().out_hw, (Hw{8, 8}));
}

TEST(Encoder, ChainingFailure) {
  auto a = preset_arch("toy2");
  a.stages[1].blocks[0].convs[0].in_channels = 5;
  EXPECT_THROW(validate(a), ShapeError);
  auto b = preset_arch("toy2");
  b.stages[1].blocks[0].convs[1].groups = 3;
  EXPECT_THROW(validate(b), ConfigError);
}

TEST(Encoder, RepeatedEvaluationIdentical) {
  Encoder<double> enc(preset_arch("toy3", Hw{12, 12}), 2);
  std::mt19937_64 rng(8);
  const Td x = random_tensor({3, 3, 12, 12}, rng);
  const auto a = enc.forward(x), b = enc.forward(x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Encoder, SeededInitIsReproducible) {
  Encoder<double> a(preset_arch("toy2"), 5), b(preset_arch("toy2"), 5), c(preset_arch("toy2"), 6);
  EXPECT_EQ(a.state(), b.state());
  EXPECT_NE(a.state().at("s0.stem.conv.w"), c.state().at("s0.stem.conv.w"));
}

namespace {

void check_encoder_grads(const ArchitectureSpec& arch, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph<double> g;
  const NodeId x = g.input("x", {batch, arch.input_channels, arch.input_hw[0], arch.input_hw[1]});
  const auto nodes = build_encoder_nodes(g, arch, x, seed);
  NodeId loss = 0;
  bool first = true;
  for (NodeId b : nodes.boundaries()) {
    const NodeId r = g.constant(random_tensor(g.shape(b), rng));
    const NodeId term = ops::sum(g, ops::mul(g, b, r));
    loss = first ? term : ops::add(g, loss, term);
    first = false;
  }
  g.bind(x, random_tensor(g.shape(x), rng));
  GradCheckOptions opt;
  opt.samples_per_param = 6;
  const auto res = check_gradients(g, loss, opt);
  EXPECT_GT(res.checked, 20u);
  EXPECT_LT(res.max_rel_error, 1e-4);
}

}  // namespace

TEST(BlockGradients, ToyEncoder) { check_encoder_grads(preset_arch("toy3", Hw{8, 8}), 3, 1); }

TEST(BlockGradients, BilinearGroupedBottleneck) {
  ArchitectureSpec a;
  a.name = "mini";
  a.input_hw = {10, 10};
  a.stem = {presets::conv(3, 4, 3), PoolSpec{3, 2, 1}};
  StageSpec s0{"a", {presets::basic(4, 4)}, {}, 4};
  BlockSpec b = presets::bottleneck(4, 4, 8, 1, 2, 2, 2);
  b.downsample = {Downsample::Kind::bilinear, {3, 3}};
  StageSpec s1{"b", {b, presets::bottleneck(8, 4, 8, 1, 2, 2, 1)}, {}, 4};
  a.stages = {s0, s1};
  validate(a);
  check_encoder_grads(a, 2, 2);
}

TEST(ArchJson, RoundTripAndStrictKeys) {
  for (const char* name : {"toy3", "resnet50", "presnet50"}) {
    const auto a = preset_arch(name);
    EXPECT_EQ(arch_from_json(arch_to_json(a)), a) << name;
  }
  json j = arch_to_json(preset_arch("toy2"));
  j["stages"][0]["blokcs"] = j["stages"][0]["blocks"];
  try {
    arch_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("did you mean 'blocks'"), std::string::npos);
  }
}
