#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "loco/json_util.hpp"
#include "loco/kernels.hpp"

namespace loco {

enum class BlockKind { basic, bottleneck };

struct Downsample {
  enum class Kind { none, stride, bilinear };
  Kind kind = Kind::none;
  Hw target{0, 0};  // bilinear only

  friend bool operator==(const Downsample&, const Downsample&) = default;
};

/// A residual (or plain) block: optional bilinear resize of the block input,
/// then a chain of conv+BN layers with relu between them. Residual blocks
/// add a shortcut (identity, or 1x1 projection when shapes differ) before
/// the final relu.
struct BlockSpec {
  BlockKind kind = BlockKind::basic;
  std::vector<ConvSpec> convs;
  bool residual = true;
  Downsample downsample;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct StageSpec {
  std::string name;
  std::vector<BlockSpec> blocks;
  Hw output_hw{0, 0};
  std::size_t base_channels = 0;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct StemSpec {
  ConvSpec conv;
  std::optional<PoolSpec> pool;

  friend bool operator==(const StemSpec&, const StemSpec&) = default;
};

/// Staged encoder description. The stem belongs to the first stage.
struct ArchitectureSpec {
  std::string name;
  std::size_t input_channels = 3;
  Hw input_hw{32, 32};
  StemSpec stem;
  std::vector<StageSpec> stages;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;

  std::size_t num_stages() const { return stages.size(); }
  std::vector<std::size_t> blocks_per_stage() const {
    std::vector<std::size_t> out;
    for (const auto& s : stages) out.push_back(s.blocks.size());
    return out;
  }
};

/// Concrete shapes of one block at a given input.
struct ResolvedBlock {
  std::size_t in_channels = 0, out_channels = 0;
  Hw in_hw{}, resized_hw{}, out_hw{};
  std::vector<Hw> conv_out_hw;
  std::optional<ConvSpec> shortcut;
};

struct ResolvedStage {
  bool has_stem = false;
  Hw stem_conv_hw{}, stem_pool_hw{};
  std::vector<ResolvedBlock> blocks;
  std::size_t out_channels = 0;
  Hw out_hw{};
};

inline ResolvedBlock resolve_block(const BlockSpec& b, std::size_t in_c, Hw in_hw, const std::string& where) {
  if (b.convs.empty()) throw ConfigError(where + ": block has no convolutions");
  ResolvedBlock r;
  r.in_channels = in_c;
  r.in_hw = in_hw;
  r.resized_hw = in_hw;
  if (b.downsample.kind == Downsample::Kind::bilinear) {
    if (!b.downsample.target[0] || !b.downsample.target[1]) throw ConfigError(where + ": bilinear target must be positive");
    r.resized_hw = b.downsample.target;
  }
  std::size_t c = in_c;
  Hw hw = r.resized_hw;
  Hw stride{1, 1};
  for (std::size_t i = 0; i < b.convs.size(); ++i) {
    const ConvSpec& cs = b.convs[i];
    try {
      cs.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(where + ".convs[" + std::to_string(i) + "]: " + e.what());
    }
    if (cs.in_channels != c) {
      throw ShapeError(where + ".convs[" + std::to_string(i) + "]: expects " + std::to_string(cs.in_channels) +
                       " input channels, chain provides " + std::to_string(c));
    }
    hw = cs.output_hw(hw);
    r.conv_out_hw.push_back(hw);
    stride[0] *= cs.stride[0];
    stride[1] *= cs.stride[1];
    c = cs.out_channels;
  }
  r.out_channels = c;
  r.out_hw = hw;
  if (b.residual && (c != in_c || hw != r.resized_hw)) {
    ConvSpec sc{in_c, c, {1, 1}, stride, {0, 0}, 1};
    if (sc.output_hw(r.resized_hw) != hw) {
      throw ShapeError(where + ": residual shortcut cannot match main-path output shape");
    }
    r.shortcut = sc;
  }
  return r;
}

/// Walks the architecture at its input resolution; throws on any chaining
/// or spec violation.
inline std::vector<ResolvedStage> resolve(const ArchitectureSpec& a) {
  if (a.stages.empty()) throw ConfigError("architecture '" + a.name + "': needs at least one stage");
  if (a.input_channels == 0 || !a.input_hw[0] || !a.input_hw[1]) {
    throw ConfigError("architecture '" + a.name + "': input shape must be positive");
  }
  std::set<std::string> names;
  for (const auto& s : a.stages) {
    if (s.name.empty()) throw ConfigError("architecture '" + a.name + "': stage names must be non-empty");
    if (!names.insert(s.name).second) throw ConfigError("architecture '" + a.name + "': duplicate stage '" + s.name + "'");
  }
  try {
    a.stem.conv.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("stem: " + std::string(e.what()));
  }
  if (a.stem.conv.in_channels != a.input_channels) {
    throw ShapeError("stem: expects " + std::to_string(a.stem.conv.in_channels) + " channels, input has " +
                     std::to_string(a.input_channels));
  }
  std::vector<ResolvedStage> out;
  std::size_t c = a.stem.conv.out_channels;
  Hw hw = a.stem.conv.output_hw(a.input_hw);
  Hw prev_hw = a.input_hw;
  for (std::size_t si = 0; si < a.stages.size(); ++si) {
    const StageSpec& st = a.stages[si];
    ResolvedStage rs;
    if (si == 0) {
      rs.has_stem = true;
      rs.stem_conv_hw = hw;
      if (a.stem.pool) hw = a.stem.pool->output_hw(hw);
      rs.stem_pool_hw = hw;
    }
    if (st.blocks.empty()) throw ConfigError("stage '" + st.name + "': needs at least one block");
    for (std::size_t bi = 0; bi < st.blocks.size(); ++bi) {
      ResolvedBlock rb = resolve_block(st.blocks[bi], c, hw, "stage '" + st.name + "'.blocks[" + std::to_string(bi) + "]");
      c = rb.out_channels;
      hw = rb.out_hw;
      rs.blocks.push_back(std::move(rb));
    }
    rs.out_channels = c;
    rs.out_hw = hw;
    if (st.output_hw != Hw{0, 0} && st.output_hw != hw) {
      throw ShapeError("stage '" + st.name + "': declared output " + std::to_string(st.output_hw[0]) + "x" +
                       std::to_string(st.output_hw[1]) + ", computed " + std::to_string(hw[0]) + "x" +
                       std::to_string(hw[1]));
    }
    if (hw[0] > prev_hw[0] || hw[1] > prev_hw[1]) {
      throw ShapeError("stage '" + st.name + "': resolution increases along depth");
    }
    prev_hw = hw;
    out.push_back(std::move(rs));
  }
  return out;
}

inline void validate(const ArchitectureSpec& a) { (void)resolve(a); }

// Presets -----------------------------------------------------------------------

namespace presets {

inline ConvSpec conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride = 1, std::size_t groups = 1) {
  return ConvSpec{in, out, {k, k}, {stride, stride}, {k / 2, k / 2}, groups};
}

inline BlockSpec basic(std::size_t in, std::size_t out, std::size_t stride = 1) {
  BlockSpec b;
  b.kind = BlockKind::basic;
  b.convs = {conv(in, out, 3, stride), conv(out, out, 3)};
  if (stride > 1) b.downsample.kind = Downsample::Kind::stride;
  return b;
}

/// 1x1 (g_reduce) -> 3x3 (g_mid, carries the stride) -> 1x1 (g_expand).
inline BlockSpec bottleneck(std::size_t in, std::size_t mid, std::size_t out, std::size_t stride = 1,
                            std::size_t g_reduce = 1, std::size_t g_mid = 1, std::size_t g_expand = 1) {
  BlockSpec b;
  b.kind = BlockKind::bottleneck;
  b.convs = {conv(in, mid, 1, 1, g_reduce), conv(mid, mid, 3, stride, g_mid), conv(mid, out, 1, 1, g_expand)};
  if (stride > 1) b.downsample.kind = Downsample::Kind::stride;
  return b;
}

inline void fill_output_hw(ArchitectureSpec& a) {
  for (auto& s : a.stages) s.output_hw = {0, 0};
  const auto rs = resolve(a);
  for (std::size_t i = 0; i < rs.size(); ++i) a.stages[i].output_hw = rs[i].out_hw;
}

inline ArchitectureSpec resnet50(Hw input) {
  ArchitectureSpec a;
  a.name = "resnet50";
  a.input_hw = input;
  a.stem = {ConvSpec{3, 64, {7, 7}, {2, 2}, {3, 3}, 1}, PoolSpec{3, 2, 1}};
  struct S {
    const char* name;
    std::size_t mid, out, blocks, stride;
  };
  const S cfg[] = {{"conv1+res2", 64, 256, 3, 1}, {"res3", 128, 512, 4, 2}, {"res4", 256, 1024, 6, 2}, {"res5", 512, 2048, 3, 2}};
  std::size_t c = 64;
  for (const S& s : cfg) {
    StageSpec st;
    st.name = s.name;
    st.base_channels = s.mid;
    for (std::size_t b = 0; b < s.blocks; ++b) {
      st.blocks.push_back(bottleneck(c, s.mid, s.out, b == 0 ? s.stride : 1));
      c = s.out;
    }
    a.stages.push_back(std::move(st));
  }
  fill_output_hw(a);
  return a;
}

/// Progressive ResNet-50: six stages, bilinear downsampling between stages,
/// basic blocks early and grouped bottlenecks late.
///
/// `grouped_expand_all` groups the expanding 1x1 of non-first blocks in all
/// three grouped stages (the appendix block table read literally); the
/// default groups it only in the last stage, which is the reading that
/// reproduces the published per-stage FLOPs split.
inline ArchitectureSpec presnet50(Hw input, bool grouped_expand_all = false) {
  ArchitectureSpec a;
  a.name = grouped_expand_all ? "presnet50_table6" : "presnet50";
  a.input_hw = input;
  a.stem = {ConvSpec{3, 32, {7, 7}, {2, 2}, {3, 3}, 1}, PoolSpec{3, 2, 1}};
  auto scaled = [&](std::size_t t, int d) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(t) * input[d] / 224.0)));
  };
  auto target = [&](std::size_t t) { return Hw{scaled(t, 0), scaled(t, 1)}; };
  std::size_t c = 32;
  {
    StageSpec st{"conv1+res2", {}, {}, 56};
    for (int b = 0; b < 3; ++b, c = 56) st.blocks.push_back(basic(c, 56));
    a.stages.push_back(std::move(st));
  }
  {
    StageSpec st{"res3", {}, {}, 96};
    for (int b = 0; b < 3; ++b, c = 96) {
      BlockSpec blk = basic(c, 96);
      if (b == 0) blk.downsample = {Downsample::Kind::bilinear, target(36)};
      st.blocks.push_back(blk);
    }
    a.stages.push_back(std::move(st));
  }
  struct S {
    const char* name;
    std::size_t res, mid, out, groups;
  };
  const S cfg[] = {{"res4", 24, 144, 576, 1}, {"res5", 16, 256, 1024, 2}, {"res6", 12, 512, 2048, 16}, {"res7", 8, 1024, 4096, 128}};
  for (const S& s : cfg) {
    StageSpec st{s.name, {}, {}, s.mid};
    const bool last = s.groups == 128;
    for (int b = 0; b < 3; ++b) {
      const std::size_t g_expand = (b > 0 && (grouped_expand_all || last)) ? s.groups : 1;
      BlockSpec blk = bottleneck(c, s.mid, s.out, 1, s.groups, s.groups, g_expand);
      if (b == 0) blk.downsample = {Downsample::Kind::bilinear, target(s.res)};
      st.blocks.push_back(blk);
      c = s.out;
    }
    a.stages.push_back(std::move(st));
  }
  fill_output_hw(a);
  return a;
}

/// k small stages of one basic block each; channels 8, 16, 32, ...; every
/// stage after the first halves the resolution.
inline ArchitectureSpec toy(std::size_t k, Hw input) {
  if (k == 0) throw ConfigError("toy preset needs at least one stage");
  ArchitectureSpec a;
  a.name = "toy" + std::to_string(k);
  a.input_hw = input;
  a.stem = {conv(3, 8, 3), std::nullopt};
  std::size_t c = 8;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t out = std::size_t{8} << i;
    StageSpec st{"s" + std::to_string(i), {basic(c, out, i == 0 ? 1 : 2)}, {}, out};
    a.stages.push_back(std::move(st));
    c = out;
  }
  fill_output_hw(a);
  return a;
}

}  // namespace presets

/// Default input resolution of a named preset.
inline Hw preset_default_input(std::string_view name) {
  if (name == "resnet50" || name.rfind("presnet50", 0) == 0) return {224, 224};
  return {32, 32};
}

/// Named presets: resnet50, presnet50, presnet50_table6, toyK / toy(K).
inline ArchitectureSpec preset_arch(std::string_view name, std::optional<Hw> input = std::nullopt) {
  const Hw in = input.value_or(preset_default_input(name));
  if (name == "resnet50") return presets::resnet50(in);
  if (name == "presnet50") return presets::presnet50(in, false);
  if (name == "presnet50_table6") return presets::presnet50(in, true);
  if (name.rfind("toy", 0) == 0) {
    std::string digits(name.substr(3));
    if (!digits.empty() && digits.front() == '(' && digits.back() == ')') digits = digits.substr(1, digits.size() - 2);
    if (!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos) {
      return presets::toy(std::stoul(digits), in);
    }
  }
  throw ConfigError("unknown architecture preset '" + std::string(name) + "'");
}

// JSON ------------------------------------------------------------------------------

inline json conv_to_json(const ConvSpec& c) {
  return {{"in", c.in_channels},
          {"out", c.out_channels},
          {"kernel", {c.kernel[0], c.kernel[1]}},
          {"stride", {c.stride[0], c.stride[1]}},
          {"padding", {c.padding[0], c.padding[1]}},
          {"groups", c.groups}};
}

inline ConvSpec conv_from_json(const json& j, const std::string& where) {
  jsonu::reject_unknown(j, {"in", "out", "kernel", "stride", "padding", "groups"}, where);
  ConvSpec c;
  c.in_channels = jsonu::require<std::size_t>(j, "in", where);
  c.out_channels = jsonu::require<std::size_t>(j, "out", where);
  c.kernel = jsonu::pair_of(j.at("kernel"), where + ".kernel");
  c.stride = j.contains("stride") ? jsonu::pair_of(j.at("stride"), where + ".stride") : Hw{1, 1};
  c.padding = j.contains("padding") ? jsonu::pair_of(j.at("padding"), where + ".padding") : Hw{0, 0};
  c.groups = jsonu::get_or<std::size_t>(j, "groups", 1, where);
  return c;
}

inline json arch_to_json(const ArchitectureSpec& a) {
  json stages = json::array();
  for (const auto& s : a.stages) {
    json blocks = json::array();
    for (const auto& b : s.blocks) {
      json convs = json::array();
      for (const auto& c : b.convs) convs.push_back(conv_to_json(c));
      json ds;
      switch (b.downsample.kind) {
        case Downsample::Kind::none: ds = {{"type", "none"}}; break;
        case Downsample::Kind::stride: ds = {{"type", "stride"}}; break;
        case Downsample::Kind::bilinear:
          ds = {{"type", "bilinear"}, {"hw", {b.downsample.target[0], b.downsample.target[1]}}};
          break;
      }
      blocks.push_back({{"kind", b.kind == BlockKind::basic ? "basic" : "bottleneck"},
                        {"residual", b.residual},
                        {"downsample", ds},
                        {"convs", convs}});
    }
    stages.push_back({{"name", s.name},
                      {"base_channels", s.base_channels},
                      {"output_hw", {s.output_hw[0], s.output_hw[1]}},
                      {"blocks", blocks}});
  }
  json stem = {{"conv", conv_to_json(a.stem.conv)}, {"pool", nullptr}};
  if (a.stem.pool) {
    stem["pool"] = {{"kernel", a.stem.pool->kernel}, {"stride", a.stem.pool->stride}, {"padding", a.stem.pool->padding}};
  }
  return {{"name", a.name},
          {"input_channels", a.input_channels},
          {"input_hw", {a.input_hw[0], a.input_hw[1]}},
          {"stem", stem},
          {"stages", stages}};
}

inline ArchitectureSpec arch_from_json(const json& j) {
  const std::string where = "arch";
  jsonu::reject_unknown(j, {"name", "input_channels", "input_hw", "stem", "stages"}, where);
  ArchitectureSpec a;
  a.name = jsonu::get_or<std::string>(j, "name", "custom", where);
  a.input_channels = jsonu::get_or<std::size_t>(j, "input_channels", 3, where);
  a.input_hw = jsonu::pair_of(j.at("input_hw"), where + ".input_hw");
  const json& stem = j.at("stem");
  jsonu::reject_unknown(stem, {"conv", "pool"}, where + ".stem");
  a.stem.conv = conv_from_json(stem.at("conv"), where + ".stem.conv");
  if (stem.contains("pool") && !stem.at("pool").is_null()) {
    const json& p = stem.at("pool");
    jsonu::reject_unknown(p, {"kernel", "stride", "padding"}, where + ".stem.pool");
    a.stem.pool = PoolSpec{jsonu::require<std::size_t>(p, "kernel", where + ".stem.pool"),
                           jsonu::require<std::size_t>(p, "stride", where + ".stem.pool"),
                           jsonu::get_or<std::size_t>(p, "padding", 0, where + ".stem.pool")};
  }
  for (std::size_t si = 0; si < j.at("stages").size(); ++si) {
    const json& s = j.at("stages")[si];
    const std::string sw = where + ".stages[" + std::to_string(si) + "]";
    jsonu::reject_unknown(s, {"name", "base_channels", "output_hw", "blocks"}, sw);
    StageSpec st;
    st.name = jsonu::require<std::string>(s, "name", sw);
    st.base_channels = jsonu::get_or<std::size_t>(s, "base_channels", 0, sw);
    st.output_hw = s.contains("output_hw") ? jsonu::pair_of(s.at("output_hw"), sw + ".output_hw") : Hw{0, 0};
    for (std::size_t bi = 0; bi < s.at("blocks").size(); ++bi) {
      const json& b = s.at("blocks")[bi];
      const std::string bw = sw + ".blocks[" + std::to_string(bi) + "]";
      jsonu::reject_unknown(b, {"kind", "residual", "downsample", "convs"}, bw);
      BlockSpec blk;
      const auto kind = jsonu::get_or<std::string>(b, "kind", "basic", bw);
      if (kind == "basic") blk.kind = BlockKind::basic;
      else if (kind == "bottleneck") blk.kind = BlockKind::bottleneck;
      else throw ConfigError(bw + ".kind: expected basic or bottleneck");
      blk.residual = jsonu::get_or<bool>(b, "residual", true, bw);
      if (b.contains("downsample")) {
        const json& d = b.at("downsample");
        jsonu::reject_unknown(d, {"type", "hw"}, bw + ".downsample");
        const auto type = jsonu::require<std::string>(d, "type", bw + ".downsample");
        if (type == "none") blk.downsample.kind = Downsample::Kind::none;
        else if (type == "stride") blk.downsample.kind = Downsample::Kind::stride;
        else if (type == "bilinear") {
          blk.downsample.kind = Downsample::Kind::bilinear;
          blk.downsample.target = jsonu::pair_of(d.at("hw"), bw + ".downsample.hw");
        } else {
          throw ConfigError(bw + ".downsample.type: expected none, stride or bilinear");
        }
      }
      for (std::size_t ci = 0; ci < b.at("convs").size(); ++ci) {
        blk.convs.push_back(conv_from_json(b.at("convs")[ci], bw + ".convs[" + std::to_string(ci) + "]"));
      }
      st.blocks.push_back(std::move(blk));
    }
    a.stages.push_back(std::move(st));
  }
  validate(a);
  return a;
}

}  // namespace loco
