#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/losses.hpp"
#include "mde/network.hpp"

namespace mde {

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 = only the final checkpoint
  int precision = 32;                // 32 | 64
  std::uint64_t max_steps = 0;       // absolute cap; 0 = run all epochs
  bool augment = true;
  std::size_t workers = 1;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate must be positive");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
      throw ConfigError("train: Adam betas must lie in (0, 1)");
    if (precision != 32 && precision != 64)
      throw ConfigError("train: precision must be 32 or 64");
  }
};

struct TrainLogRecord {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double l1 = 0, l1_grad = 0, l_ssim = 0, total = 0;
  double wall_ms = 0;
};

inline void write_log_csv(const std::vector<TrainLogRecord>& log, std::ostream& os) {
  os << "step,epoch,l1,l1_grad,l_ssim,total,wall_ms\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%llu,%zu,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                  (unsigned long long)r.step, r.epoch, r.l1, r.l1_grad, r.l_ssim, r.total,
                  r.wall_ms);
    os << buf;
  }
}

inline void write_log_csv(const std::vector<TrainLogRecord>& log, const std::string& path) {
  std::ofstream f(path, std::ios::binary);  // LF line endings on every platform
  if (!f) throw IoError("cannot open log file '" + path + "'");
  write_log_csv(log, f);
}

/// Bias-corrected first/second moment buffers, one pair per parameter in
/// registry order.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const typename Network<T>::ParamList& params) {
    AdamState s;
    for (const auto& [name, p] : params) {
      s.m.emplace_back(p.size(), T(0));
      s.v.emplace_back(p.size(), T(0));
    }
    return s;
  }
};

/// One Adam update over all parameters. Parameters without an accumulated
/// gradient this step are treated as zero-gradient.
template <typename T>
void adam_step(typename Network<T>::ParamList& params, AdamState<T>& state,
               const TrainConfig& cfg) {
  if (state.m.size() != params.size())
    throw StateError("adam_step: state does not match parameter list");
  ++state.t;
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T lr = T(cfg.learning_rate), eps = T(cfg.eps_adam);
  const T bc1 = T(1) - T(std::pow(cfg.beta1, double(state.t)));
  const T bc2 = T(1) - T(std::pow(cfg.beta2, double(state.t)));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].second;
    auto pv = p.values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool has_g = p.has_grad();
    auto g = has_g ? p.grad() : std::span<const T>{};
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const T gi = has_g ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      pv[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

/// Network plus optimizer state plus global step counter; the unit that
/// training checkpoints serialize.
template <typename T>
struct TrainState {
  Network<T> net;
  AdamState<T> adam;
  std::uint64_t step = 0;

  static TrainState fresh(const NetworkConfig& cfg) {
    TrainState s{Network<T>::build(cfg), {}, 0};
    auto params = s.net.parameters();
    s.adam = AdamState<T>::zeros_like(params);
    return s;
  }
};

template <typename T>
void save_train_state(const TrainState<T>& state, const std::string& path) {
  TensorArchive a = state.net.to_archive();
  auto params = state.net.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto ext = std::vector<std::uint64_t>(params[k].second.shape().begin(),
                                                params[k].second.shape().end());
    a.add<T>("adam.m." + params[k].first, ext, std::span<const T>(state.adam.m[k]));
    a.add<T>("adam.v." + params[k].first, ext, std::span<const T>(state.adam.v[k]));
  }
  const T step_val = T(state.adam.t);
  a.add<T>("adam.step", {1}, std::span<const T>(&step_val, 1));
  const T gstep_val = T(state.step);
  a.add<T>("adam.global_step", {1}, std::span<const T>(&gstep_val, 1));
  a.save(path);
}

template <typename T>
TrainState<T> load_train_state(const std::string& path) {
  TensorArchive a = TensorArchive::load(path);
  TrainState<T> s{Network<T>::from_archive(a), {}, 0};
  auto params = s.net.parameters();
  s.adam = AdamState<T>::zeros_like(params);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (const auto* e = a.find("adam.m." + params[k].first))
      a.copy_out<T>(*e, std::span<T>(s.adam.m[k]));
    if (const auto* e = a.find("adam.v." + params[k].first))
      a.copy_out<T>(*e, std::span<T>(s.adam.v[k]));
  }
  if (const auto* e = a.find("adam.step")) {
    T v;
    a.copy_out<T>(*e, std::span<T>(&v, 1));
    s.adam.t = std::uint64_t(v);
  }
  if (const auto* e = a.find("adam.global_step")) {
    T v;
    a.copy_out<T>(*e, std::span<T>(&v, 1));
    s.step = std::uint64_t(v);
  }
  return s;
}

struct TrainResult {
  std::vector<TrainLogRecord> log;
  std::string final_checkpoint;
  std::string last_checkpoint;  // most recent periodic checkpoint, if any
};

/// Optimization loop: batches -> forward -> composite loss -> backward ->
/// Adam update, resuming from state.step. A non-finite loss aborts with the
/// offending step; the last written checkpoint is retained.
template <typename T>
TrainResult train(TrainState<T>& state, const Dataset& dataset, const TrainConfig& train_cfg,
                  const LossConfig& loss_cfg, const std::string& out_dir = "") {
  train_cfg.validate();
  loss_cfg.validate();
  if (dataset.size() == 0) throw DataError("train: empty dataset");

  const std::size_t steps_per_epoch =
      (dataset.size() + train_cfg.batch_size - 1) / train_cfg.batch_size;
  std::uint64_t total_steps = std::uint64_t(train_cfg.epochs) * steps_per_epoch;
  if (train_cfg.max_steps > 0) total_steps = std::min(total_steps, train_cfg.max_steps);

  BatchOptions bopts;
  bopts.batch_size = train_cfg.batch_size;
  bopts.seed = train_cfg.seed;
  bopts.augment = train_cfg.augment;
  bopts.target_downsampling = state.net.config().output_downsampling();
  bopts.max_depth = loss_cfg.max_depth;
  bopts.min_depth = loss_cfg.min_depth;
  bopts.workers = train_cfg.workers;

  TrainResult result;
  auto params = state.net.parameters();
  const bool write_ckpts = !out_dir.empty();
  if (write_ckpts) std::filesystem::create_directories(out_dir);

  while (state.step < total_steps) {
    const std::size_t epoch = std::size_t(state.step / steps_per_epoch);
    const std::size_t batch_idx = std::size_t(state.step % steps_per_epoch);
    bopts.epoch = epoch;
    const auto batches = epoch_batches(dataset.size(), train_cfg.batch_size, train_cfg.seed, epoch);
    const auto t0 = std::chrono::steady_clock::now();

    Batch<T> batch = make_batch<T>(dataset, batches[batch_idx], bopts);
    for (auto& [name, p] : params) p.zero_grad();
    Tensor<T> pred = state.net.forward(batch.rgb, BnMode::train);
    LossBreakdown<T> loss = composite_loss(batch.target, pred, loss_cfg, batch.mask);

    TrainLogRecord rec;
    rec.step = state.step;
    rec.epoch = epoch;
    rec.l1 = double(loss.l1.item());
    rec.l1_grad = double(loss.l1_grad.item());
    rec.l_ssim = double(loss.l_ssim.item());
    rec.total = double(loss.total.item());
    if (!std::isfinite(rec.total) || !std::isfinite(rec.l1) || !std::isfinite(rec.l1_grad) ||
        !std::isfinite(rec.l_ssim)) {
      throw TrainAbort(std::size_t(state.step),
                       "train: non-finite loss at step " + std::to_string(state.step) +
                           (result.last_checkpoint.empty()
                                ? std::string("; no checkpoint written yet")
                                : "; last good checkpoint: " + result.last_checkpoint));
    }

    backward(loss.total);
    adam_step<T>(params, state.adam, train_cfg);
    ++state.step;

    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    result.log.push_back(rec);

    if (write_ckpts && train_cfg.checkpoint_every > 0 &&
        state.step % train_cfg.checkpoint_every == 0 && state.step < total_steps) {
      const std::string path =
          (std::filesystem::path(out_dir) / ("ckpt_step_" + std::to_string(state.step) + ".mdec"))
              .string();
      save_train_state(state, path);
      result.last_checkpoint = path;
    }
  }

  if (write_ckpts) {
    result.final_checkpoint = (std::filesystem::path(out_dir) / "final.mdec").string();
    save_train_state(state, result.final_checkpoint);
  }
  return result;
}

/// Raw model-size accounting (Table-style report): trainable parameter
/// count, serialized network checkpoint bytes, and megabytes.
struct SizeReport {
  std::size_t param_count = 0;
  std::size_t encoder_param_count = 0;
  std::size_t checkpoint_bytes = 0;
  double megabytes = 0;
};

template <typename T>
SizeReport size_report(const Network<T>& net) {
  SizeReport r;
  r.param_count = net.param_count();
  r.encoder_param_count = net.encoder_param_count();
  r.checkpoint_bytes = net.to_archive().byte_size();
  r.megabytes = double(r.checkpoint_bytes) / double(1 << 20);
  return r;
}

}  // namespace mde
