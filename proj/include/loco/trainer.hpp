#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "loco/dataset.hpp"
#include "loco/hash.hpp"
#include "loco/optim.hpp"
#include "loco/topology.hpp"

namespace loco {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

struct TrainConfig {
  ArchitectureSpec arch = preset_arch("toy3");
  TopologyChoice topology{TopologyMode::loco, 1, 1e-3};
  DecoderSpec decoder;
  AugmentConfig augment;
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::size_t batch = 128;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  std::size_t checkpoint_every = 0;  // steps; 0 = only at the end

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    loco::validate(arch);
    decoder.validate();
    augment.validate();
    optimizer.validate();
    schedule.validate();
    if (batch < 4) throw ConfigError("batch must be >= 4 (InfoNCE needs negatives)");
    if (augment.output_hw != arch.input_hw) {
      throw ConfigError("augment.output_hw must equal the architecture input size");
    }
    (void)build_units(arch, topology);
  }
};

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"arch", arch_to_json(c.arch)},
              {"topology", to_string(c.topology)},
              {"decoder", decoder_to_json(c.decoder)},
              {"augment", augment_to_json(c.augment)},
              {"optimizer", optimizer_to_json(c.optimizer)},
              {"schedule", schedule_to_json(c.schedule)},
              {"batch", c.batch},
              {"seed", c.seed},
              {"precision", to_string(c.precision)},
              {"checkpoint_every", c.checkpoint_every}};
}

inline Digest fingerprint(const TrainConfig& c) { return sha256(train_config_to_json(c).dump()); }

// Checkpoints ------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Every tensor is stored as binary64; the training step travels as the
/// scalar tensor "meta.step".
struct Checkpoint {
  State<double> tensors;
  std::uint64_t step = 0;
  Digest fingerprint{};

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  State<double> all = ck.tensors;
  all["meta.step"] = Tensor<double>::scalar(static_cast<double>(ck.step));
  std::string out = "LOCO";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  out.append(reinterpret_cast<const char*>(ck.fingerprint.data()), ck.fingerprint.size());
  detail::put_le<std::uint64_t>(out, all.size());
  for (const auto& [name, t] : all) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le<std::uint64_t>(out, e);
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint64_t bits;
      const double v = t[i];
      std::memcpy(&bits, &v, sizeof bits);
      detail::put_le<std::uint64_t>(out, bits);
    }
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  if (bytes.size() < 48 || bytes.compare(0, 4, "LOCO") != 0) throw IoError(source + ": not a checkpoint file");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  std::memcpy(ck.fingerprint.data(), bytes.data() + pos, ck.fingerprint.size());
  pos += ck.fingerprint.size();
  const auto n = detail::get_le<std::uint64_t>(bytes, pos);
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw IoError(source + ": truncated tensor name");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
    if (rank > 8) throw IoError(source + ": tensor '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get_le<std::uint64_t>(bytes, pos));
    const std::size_t count = shape_numel(shape);
    if (count > (bytes.size() - pos) / 8) throw IoError(source + ": truncated tensor '" + name + "'");
    Tensor<double> t(shape);
    for (std::size_t i = 0; i < count; ++i) {
      const auto bits = detail::get_le<std::uint64_t>(bytes, pos);
      std::memcpy(&t[i], &bits, sizeof bits);
    }
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) throw IoError(source + ": trailing bytes after last tensor");
  auto it = ck.tensors.find("meta.step");
  if (it == ck.tensors.end()) throw IoError(source + ": missing meta.step");
  ck.step = static_cast<std::uint64_t>(it->second.item());
  ck.tensors.erase(it);
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  detail::write_file(path, encode_checkpoint(ck));
}

/// Loads a checkpoint; when `expected` is given the stored fingerprint must match it.
inline Checkpoint load_checkpoint(const std::string& path, const std::optional<Digest>& expected = std::nullopt) {
  Checkpoint ck = decode_checkpoint(detail::read_file(path), path);
  if (expected && *expected != ck.fingerprint) {
    throw ConfigError(path + ": config fingerprint " + hex(ck.fingerprint) + " does not match " + hex(*expected));
  }
  return ck;
}

template <typename T>
State<double> to_f64(const State<T>& s) {
  State<double> out;
  for (const auto& [k, v] : s) out.emplace(k, v.template cast<double>());
  return out;
}

template <typename T>
State<T> from_f64(const State<double>& s) {
  State<T> out;
  for (const auto& [k, v] : s) out.emplace(k, v.template cast<T>());
  return out;
}

// Metrics ----------------------------------------------------------------------------

struct MetricsRecord {
  std::size_t step = 0, epoch = 0;
  double lr = 0;
  std::vector<double> unit_losses;
  double penalty = 0;
  double wall_ms = 0;
};

/// Append-only CSV: step,epoch,lr,unit_0_loss..unit_{U-1}_loss,penalty,wall_ms.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& os, std::size_t units, std::size_t flush_every = 1)
      : os_(os), units_(units), flush_every_(std::max<std::size_t>(flush_every, 1)) {}

  static std::string header(std::size_t units) {
    std::string h = "step,epoch,lr";
    for (std::size_t u = 0; u < units; ++u) h += ",unit_" + std::to_string(u) + "_loss";
    return h + ",penalty,wall_ms";
  }

  void write(const MetricsRecord& r) {
    if (r.unit_losses.size() != units_) throw ShapeError("metrics: record has the wrong number of unit losses");
    if (!wrote_header_) {
      os_ << header(units_) << '\n';
      wrote_header_ = true;
    }
    os_ << r.step << ',' << r.epoch << ',' << std::setprecision(17) << r.lr;
    for (double l : r.unit_losses) os_ << ',' << l;
    os_ << ',' << r.penalty << ',' << std::setprecision(6) << r.wall_ms << '\n';
    if (++since_flush_ >= flush_every_) {
      os_.flush();
      since_flush_ = 0;
    }
    if (!os_) throw IoError("metrics: write failed");
  }

 private:
  std::ostream& os_;
  std::size_t units_, flush_every_, since_flush_ = 0;
  bool wrote_header_ = false;
};

// Training ---------------------------------------------------------------------------

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_step;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRecord> metrics;
};

inline std::size_t steps_per_epoch(const TrainConfig& cfg, const Dataset& d) {
  if (d.count < cfg.batch) {
    throw ConfigError("dataset has " + std::to_string(d.count) + " images, fewer than batch " + std::to_string(cfg.batch));
  }
  return d.count / cfg.batch;
}

namespace detail {
inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL)); }
}  // namespace detail

/// Contrastive pretraining: each step augments `batch` sources into 2N views,
/// runs the encoder once, backpropagates every unit and applies the optimizer.
template <typename T>
TrainResult train(TrainConfig cfg, const Dataset& data, const TrainHooks& hooks = {}) {
  data.validate();
  cfg.schedule.steps_per_epoch = steps_per_epoch(cfg, data);
  cfg.validate();
  const Digest fp = fingerprint(cfg);
  LocalModel<T> model(cfg.arch, build_units(cfg.arch, cfg.topology), cfg.decoder, 2 * cfg.batch, cfg.seed);
  model.graph().set_training(true);
  Optimizer<T> opt(cfg.optimizer);

  std::vector<Tensor<T>> images;
  images.reserve(data.count);
  for (std::size_t i = 0; i < data.count; ++i) images.push_back(data.image<T>(i));

  const std::size_t spe = cfg.schedule.steps_per_epoch, total = cfg.schedule.total_steps();
  const Shape view_shape{cfg.arch.input_channels, cfg.arch.input_hw[0], cfg.arch.input_hw[1]};
  const std::size_t view_size = shape_numel(view_shape);
  Tensor<T> batch({2 * cfg.batch, view_shape[0], view_shape[1], view_shape[2]});
  std::vector<std::size_t> order(data.count);
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();

  auto snapshot = [&](std::size_t step) { return Checkpoint{to_f64(model.state()), step, fp}; };

  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t epoch = step / spe, within = step % spe;
    if (within == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 rng(detail::mix(cfg.seed, 0x5eed0000ULL + epoch));
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (std::size_t j = 0; j < cfg.batch; ++j) {
      const std::size_t src = order[within * cfg.batch + j];
      auto [a, b] = augment(images[src], cfg.augment, detail::mix(detail::mix(cfg.seed, step), j));
      std::copy(a.storage().begin(), a.storage().end(), batch.storage().begin() + static_cast<std::ptrdiff_t>(2 * j * view_size));
      std::copy(b.storage().begin(), b.storage().end(),
                batch.storage().begin() + static_cast<std::ptrdiff_t>((2 * j + 1) * view_size));
    }
    const double lr = lr_at(cfg.schedule, step);
    model.forward_once(batch);
    LocalBackwardResult<T> res = model.local_backward();
    MetricsRecord rec;
    rec.step = step;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t u = 0; u < res.unit_losses.size(); ++u) {
      const double l = static_cast<double>(res.unit_losses[u]);
      if (!std::isfinite(l)) {
        throw NumericError("train: non-finite loss in unit " + std::to_string(u) + " at step " + std::to_string(step) +
                           " (lr " + std::to_string(lr) + ")");
      }
      rec.unit_losses.push_back(l);
    }
    rec.penalty = static_cast<double>(res.penalty);
    for (const auto& [name, gr] : res.grads) {
      if (!gr.all_finite()) {
        throw NumericError("train: non-finite gradient for '" + name + "' at step " + std::to_string(step));
      }
    }
    opt.step(model.graph(), res.grads, lr);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_step) hooks.on_step(rec);
    result.metrics.push_back(std::move(rec));
    if (cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < total && hooks.on_checkpoint) {
      hooks.on_checkpoint(snapshot(step + 1));
    }
  }
  result.checkpoint = snapshot(total);
  if (hooks.on_checkpoint) hooks.on_checkpoint(result.checkpoint);
  return result;
}

// Linear probe -----------------------------------------------------------------------

struct ProbeConfig {
  std::vector<double> lr_grid{1, 3, 10, 30};
  std::size_t epochs = 30;
  std::size_t batch = 128;
  std::size_t holdout = 5;
  std::uint64_t seed = 0;

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;

  void validate() const {
    if (lr_grid.empty()) throw ConfigError("probe.lr_grid must not be empty");
    for (double lr : lr_grid)
      if (!(lr > 0)) throw ConfigError("probe.lr_grid entries must be > 0");
    if (epochs == 0) throw ConfigError("probe.epochs must be >= 1");
    if (batch == 0) throw ConfigError("probe.batch must be >= 1");
    if (holdout < 2) throw ConfigError("probe.holdout must be >= 2");
  }
};

inline json probe_to_json(const ProbeConfig& p) {
  return json{{"lr_grid", p.lr_grid}, {"epochs", p.epochs}, {"batch", p.batch}, {"holdout", p.holdout}, {"seed", p.seed}};
}

inline ProbeConfig probe_from_json(const json& j) {
  jsonu::reject_unknown(j, {"lr_grid", "epochs", "batch", "holdout", "seed"}, "probe");
  ProbeConfig p;
  p.lr_grid = jsonu::get_or(j, "lr_grid", p.lr_grid, "probe");
  p.epochs = jsonu::get_or(j, "epochs", p.epochs, "probe");
  p.batch = jsonu::get_or(j, "batch", p.batch, "probe");
  p.holdout = jsonu::get_or(j, "holdout", p.holdout, "probe");
  p.seed = jsonu::get_or(j, "seed", p.seed, "probe");
  p.validate();
  return p;
}

struct ProbeResult {
  double accuracy = 0;
  double chosen_lr = 0;
  std::vector<double> validation_accuracy;  // aligned with lr_grid
};

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

struct Softmax {
  Matrix w;
  Eigen::RowVectorXd b;

  Eigen::VectorXi predict(const Matrix& x) const {
    const Matrix logits = (x * w).rowwise() + b;
    Eigen::VectorXi out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) logits.row(i).maxCoeff(&out[i]);
    return out;
  }
};

inline double accuracy(const Softmax& m, const Matrix& x, const std::vector<std::size_t>& y) {
  const Eigen::VectorXi p = m.predict(x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hit += static_cast<std::size_t>(p[static_cast<Eigen::Index>(i)]) == y[i];
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

/// Softmax regression by minibatch SGD without momentum; lr drops 10x at 60%
/// and again at 80% of the epochs.
inline Softmax fit_softmax(const Matrix& x, const std::vector<std::size_t>& y, std::size_t classes, double lr0,
                           const ProbeConfig& cfg) {
  Softmax m{Matrix::Zero(x.cols(), static_cast<Eigen::Index>(classes)),
            Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(classes))};
  std::vector<std::size_t> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(splitmix64(cfg.seed + 0x9b0be));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double lr = lr0;
    if (e * 10 >= cfg.epochs * 6) lr *= 0.1;
    if (e * 10 >= cfg.epochs * 8) lr *= 0.1;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - s);
      Matrix xb(static_cast<Eigen::Index>(n), x.cols());
      for (std::size_t i = 0; i < n; ++i) xb.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(order[s + i]));
      Matrix p = (xb * m.w).rowwise() + m.b;
      for (Eigen::Index i = 0; i < p.rows(); ++i) {
        p.row(i).array() -= p.row(i).maxCoeff();
        p.row(i) = p.row(i).array().exp().matrix();
        p.row(i) /= p.row(i).sum();
        p(i, static_cast<Eigen::Index>(y[order[s + static_cast<std::size_t>(i)]])) -= 1.0;
      }
      p /= static_cast<double>(n);
      m.w -= lr * (xb.transpose() * p);
      m.b -= lr * p.colwise().sum();
    }
  }
  return m;
}

inline void standardize(Matrix& train, Matrix& test) {
  const Eigen::RowVectorXd mean = train.colwise().mean();
  train.rowwise() -= mean;
  test.rowwise() -= mean;
  Eigen::RowVectorXd sd = (train.array().square().colwise().sum() / static_cast<double>(train.rows())).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (!(sd[j] > 1e-12)) sd[j] = 1.0;
  train.array().rowwise() /= sd.array();
  test.array().rowwise() /= sd.array();
}

}  // namespace detail

/// Trains a linear softmax classifier on fixed features and reports top-1
/// test accuracy. The learning rate is picked from the grid on a held-out
/// slice of the training features (every holdout-th sample of each class).
inline ProbeResult probe_features(Matrix train_x, const std::vector<std::size_t>& train_y, Matrix test_x,
                                  const std::vector<std::size_t>& test_y, const ProbeConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(train_x.rows()) != train_y.size() || static_cast<std::size_t>(test_x.rows()) != test_y.size()) {
    throw ShapeError("probe: feature rows do not match label count");
  }
  if (train_x.cols() != test_x.cols()) throw ShapeError("probe: train/test feature widths differ");
  if (train_y.empty() || test_y.empty()) throw ConfigError("probe: empty split");
  const std::size_t classes = 1 + std::max(*std::max_element(train_y.begin(), train_y.end()),
                                           *std::max_element(test_y.begin(), test_y.end()));
  if (std::set<std::size_t>(train_y.begin(), train_y.end()).size() < 2) {
    throw ConfigError("probe: training labels contain a single class");
  }
  detail::standardize(train_x, test_x);

  std::vector<Eigen::Index> fit_idx, val_idx;
  std::vector<std::size_t> seen(classes, 0);
  for (Eigen::Index i = 0; i < train_x.rows(); ++i) {
    const std::size_t c = train_y[static_cast<std::size_t>(i)];
    (seen[c]++ % cfg.holdout == cfg.holdout - 1 ? val_idx : fit_idx).push_back(i);
  }
  ProbeResult r;
  double best = -1;
  if (val_idx.empty() || fit_idx.empty() || cfg.lr_grid.size() == 1) {
    r.chosen_lr = cfg.lr_grid.front();
  } else {
    const Matrix fx = train_x(fit_idx, Eigen::all), vx = train_x(val_idx, Eigen::all);
    std::vector<std::size_t> fy, vy;
    for (auto i : fit_idx) fy.push_back(train_y[static_cast<std::size_t>(i)]);
    for (auto i : val_idx) vy.push_back(train_y[static_cast<std::size_t>(i)]);
    for (double lr : cfg.lr_grid) {
      const double acc = detail::accuracy(detail::fit_softmax(fx, fy, classes, lr, cfg), vx, vy);
      r.validation_accuracy.push_back(acc);
      if (acc > best) {
        best = acc;
        r.chosen_lr = lr;
      }
    }
  }
  r.accuracy = detail::accuracy(detail::fit_softmax(train_x, train_y, classes, r.chosen_lr, cfg), test_x, test_y);
  return r;
}

/// Global-average-pooled features of the last encoder stage, evaluation mode.
template <typename T>
Matrix encoder_features(Encoder<T>& enc, const Dataset& d, std::size_t chunk = 256) {
  const Hw in = enc.arch().input_hw;
  const std::size_t c = enc.arch().input_channels;
  if (d.c != c) throw ShapeError("probe: dataset has " + std::to_string(d.c) + " channels, encoder expects " + std::to_string(c));
  Matrix out;
  for (std::size_t s = 0; s < d.count; s += chunk) {
    const std::size_t n = std::min<std::size_t>(chunk, d.count - s);
    Tensor<T> x({n, c, d.h, d.w});
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor<T> img = d.image<T>(s + i);
      std::copy(img.storage().begin(), img.storage().end(), x.storage().begin() + static_cast<std::ptrdiff_t>(i * img.size()));
    }
    if (Hw{d.h, d.w} != in) x = loco::bilinear_resize(x, in);
    const Tensor<T> pooled = loco::global_avg_pool(enc.forward(x, false).back());
    if (out.size() == 0) out.resize(d.count, static_cast<Eigen::Index>(pooled.dim(1)));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < pooled.dim(1); ++j)
        out(static_cast<Eigen::Index>(s + i), static_cast<Eigen::Index>(j)) = static_cast<double>(pooled[i * pooled.dim(1) + j]);
  }
  return out;
}

inline std::vector<std::size_t> labels_of(const Dataset& d) {
  if (!d.labels) throw ConfigError("probe: dataset has no labels");
  return std::vector<std::size_t>(d.labels->begin(), d.labels->end());
}

/// Frozen-encoder linear evaluation. The checkpoint is only read.
template <typename T = double>
ProbeResult linear_probe(const ArchitectureSpec& arch, const Checkpoint& ck, const Dataset& train_set,
                         const Dataset& test_set, const ProbeConfig& cfg) {
  Encoder<T> enc(arch);
  enc.set_state(from_f64<T>(merge_encoder_state(ck.tensors)));
  return probe_features(encoder_features(enc, train_set), labels_of(train_set), encoder_features(enc, test_set),
                        labels_of(test_set), cfg);
}

}  // namespace loco
