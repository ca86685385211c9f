#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "loco/encoder.hpp"
#include "loco/error.hpp"
#include "loco/tensor.hpp"

namespace loco {

/// Images stored as unsigned bytes, HWC per image.
struct Dataset {
  std::uint32_t count = 0;
  std::uint16_t h = 0, w = 0;
  std::uint8_t c = 0;
  std::vector<std::uint8_t> pixels;
  std::optional<std::vector<std::uint16_t>> labels;

  friend bool operator==(const Dataset&, const Dataset&) = default;

  std::size_t image_bytes() const { return std::size_t{h} * w * c; }

  void validate() const {
    if (count == 0) throw ConfigError("dataset: empty");
    if (!h || !w || !c) throw ConfigError("dataset: image extents must be positive");
    if (pixels.size() != count * image_bytes()) throw ShapeError("dataset: pixel buffer does not match header");
    if (labels && labels->size() != count) throw ShapeError("dataset: label count does not match image count");
  }

  std::size_t num_classes() const {
    if (!labels) return 0;
    std::size_t m = 0;
    for (auto l : *labels) m = std::max<std::size_t>(m, l + 1u);
    return m;
  }

  /// Image i as CHW in [-1, 1].
  template <typename T>
  Tensor<T> image(std::size_t i) const {
    if (i >= count) throw ShapeError("dataset: index " + std::to_string(i) + " out of range");
    Tensor<T> out({c, h, w});
    const std::uint8_t* src = pixels.data() + i * image_bytes();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[(ch * h + y) * w + x] = static_cast<T>(src[(y * w + x) * c + ch]) / T{127.5} - T{1};
    return out;
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.count = static_cast<std::uint32_t>(idx.size());
    d.h = h;
    d.w = w;
    d.c = c;
    const std::size_t n = image_bytes();
    d.pixels.reserve(idx.size() * n);
    if (labels) d.labels.emplace();
    for (std::size_t i : idx) {
      d.pixels.insert(d.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                      pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
      if (labels) d.labels->push_back(labels->at(i));
    }
    return d;
  }
};

namespace detail {

template <typename V>
void put_le(std::string& out, V v) {
  for (std::size_t i = 0; i < sizeof(V); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename V>
V get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(V) > in.size()) throw IoError("truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(V); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(V);
  return static_cast<V>(v);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

inline constexpr std::uint32_t kLcimVersion = 1;

/// magic "LCIM", u32 version, u32 count, u16 H, u16 W, u8 C, u8 labels-present,
/// count*H*W*C bytes, then count u16 labels if present. Little-endian.
inline std::string encode_lcim(const Dataset& d) {
  d.validate();
  std::string out = "LCIM";
  detail::put_le<std::uint32_t>(out, kLcimVersion);
  detail::put_le<std::uint32_t>(out, d.count);
  detail::put_le<std::uint16_t>(out, d.h);
  detail::put_le<std::uint16_t>(out, d.w);
  detail::put_le<std::uint8_t>(out, d.c);
  detail::put_le<std::uint8_t>(out, d.labels ? 1 : 0);
  out.append(reinterpret_cast<const char*>(d.pixels.data()), d.pixels.size());
  if (d.labels)
    for (auto l : *d.labels) detail::put_le<std::uint16_t>(out, l);
  return out;
}

inline Dataset decode_lcim(const std::string& bytes, const std::string& source = "dataset") {
  if (bytes.size() < 18 || bytes.compare(0, 4, "LCIM") != 0) throw IoError(source + ": not an LCIM file");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kLcimVersion) throw IoError(source + ": unsupported LCIM version " + std::to_string(version));
  Dataset d;
  d.count = detail::get_le<std::uint32_t>(bytes, pos);
  d.h = detail::get_le<std::uint16_t>(bytes, pos);
  d.w = detail::get_le<std::uint16_t>(bytes, pos);
  d.c = detail::get_le<std::uint8_t>(bytes, pos);
  const auto has_labels = detail::get_le<std::uint8_t>(bytes, pos);
  if (has_labels > 1) throw IoError(source + ": bad labels-present flag");
  const std::size_t expect = pos + d.count * d.image_bytes() + (has_labels ? 2u * d.count : 0u);
  if (bytes.size() != expect) {
    throw IoError(source + ": file length " + std::to_string(bytes.size()) + " does not match header (" +
                  std::to_string(expect) + ")");
  }
  d.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + d.count * d.image_bytes()));
  pos += d.pixels.size();
  if (has_labels) {
    d.labels.emplace();
    for (std::size_t i = 0; i < d.count; ++i) d.labels->push_back(detail::get_le<std::uint16_t>(bytes, pos));
  }
  d.validate();
  return d;
}

inline Dataset read_lcim(const std::string& path) { return decode_lcim(detail::read_file(path), path); }
inline void write_lcim(const std::string& path, const Dataset& d) { detail::write_file(path, encode_lcim(d)); }

struct SyntheticConfig {
  std::size_t count = 2000;
  std::size_t hw = 32;
  std::size_t classes = 10;
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;

  void validate() const {
    if (count == 0) throw ConfigError("synthetic.count must be >= 1");
    if (hw < 4 || hw > 4096) throw ConfigError("synthetic.hw must be in [4, 4096]");
    if (classes < 2 || classes > 65535) throw ConfigError("synthetic.classes must be in [2, 65535]");
  }
};

/// Class k fixes a grating orientation (k mod 5 steps of 22.5 degrees, all
/// within [0, 90] so horizontal flips never map one class onto another) and
/// a pattern type (k / 5 mod 2: plain grating or plaid). Images are nearly
/// gray with a faint random tint; brightness, phase, frequency, contrast, an
/// occluding blob and pixel noise are random per image, so color carries no
/// label information. Labels are i mod K.
inline Dataset make_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.count = static_cast<std::uint32_t>(cfg.count);
  d.h = d.w = static_cast<std::uint16_t>(cfg.hw);
  d.c = 3;
  d.pixels.resize(d.count * d.image_bytes());
  d.labels.emplace(d.count);
  const double pi = std::numbers::pi;
  const double n = static_cast<double>(cfg.hw);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    const std::size_t k = i % cfg.classes;
    (*d.labels)[i] = static_cast<std::uint16_t>(k);
    std::mt19937_64 rng(detail::splitmix64(cfg.seed * 0x9e3779b97f4a7c15ULL + i + 1));
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> noise(0, 0.06);
    const double theta = pi / 8 * static_cast<double>(k % 5) + (u(rng) - 0.5) * 0.15;
    const bool plaid = (k / 5) % 2 == 1;
    const double freq = (2.0 + 2.5 * u(rng)) / n;
    const double phase = 2 * pi * u(rng), phase2 = 2 * pi * u(rng);
    const double contrast = 0.5 + 0.5 * u(rng);
    double fg[3], bg[3];
    const double hi = 0.55 + 0.4 * u(rng), lo = 0.05 + 0.4 * u(rng);
    for (int ch = 0; ch < 3; ++ch) {
      fg[ch] = hi + 0.08 * (u(rng) - 0.5);
      bg[ch] = lo + 0.08 * (u(rng) - 0.5);
    }
    const double bx = n * u(rng), by = n * u(rng), br = n * (0.05 + 0.15 * u(rng));
    const double gray = u(rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (std::size_t y = 0; y < cfg.hw; ++y) {
      for (std::size_t x = 0; x < cfg.hw; ++x) {
        const double xf = static_cast<double>(x), yf = static_cast<double>(y);
        double wave = std::sin(2 * pi * freq * (xf * ct + yf * st) + phase);
        if (plaid) wave *= std::sin(2 * pi * freq * 0.5 * (-xf * st + yf * ct) + phase2);
        const double s = 0.5 + 0.5 * contrast * wave;
        const double dx = xf - bx, dy = yf - by;
        const bool blob = dx * dx + dy * dy < br * br;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          double v = blob ? gray : s * fg[ch] + (1 - s) * bg[ch];
          v += noise(rng);
          v = std::clamp(v, 0.0, 1.0);
          d.pixels[i * d.image_bytes() + (y * cfg.hw + x) * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      }
    }
  }
  return d;
}

/// Deterministic split: every `holdout`-th run of ten consecutive images goes
/// to the test side, which keeps i-mod-K labels balanced on both sides.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t holdout = 5) {
  if (holdout < 2) throw ConfigError("split: holdout period must be >= 2");
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < d.count; ++i) (i / 10 % holdout == holdout - 1 ? te : tr).push_back(i);
  if (tr.empty() || te.empty()) throw ConfigError("split: dataset too small to split");
  return {d.subset(tr), d.subset(te)};
}

}  // namespace loco
