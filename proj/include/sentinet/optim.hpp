#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "sentinet/data.hpp"
#include "sentinet/network.hpp"

namespace sentinet {

struct TrainConfig {
  Index batch_size = 256;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double base_lr = 0.01;
  Index lr_drop_every = 100000;
  double lr_factor = 0.1;
  Index max_iterations = 250000;
  std::uint64_t seed = 0;
  Index snapshot_every = 0;               // 0 disables snapshots
  std::filesystem::path snapshot_prefix;  // "<prefix>_iter_<n>.dsbw"

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (lr_drop_every < 1) throw ConfigError("lr_drop_every must be positive");
    if (!(lr_factor > 0 && lr_factor < 1)) throw ConfigError("lr_factor must be in (0, 1)");
    if (max_iterations < 0) throw ConfigError("max_iterations must be non-negative");
    if (snapshot_every < 0) throw ConfigError("snapshot_every must be non-negative");
  }
};

/// Step schedule: base_lr * lr_factor^floor(iteration / lr_drop_every).
inline double lr_at(const TrainConfig& config, Index iteration) {
  if (iteration < 0) throw ParameterError("lr_at: negative iteration");
  return config.base_lr * std::pow(config.lr_factor, static_cast<double>(iteration / config.lr_drop_every));
}

template <typename Scalar>
struct OptimizerState {
  std::vector<Tensor<Scalar>> velocity;
  Index iteration = 0;
};

template <typename Scalar>
OptimizerState<Scalar> make_optimizer_state(const Network<Scalar>& model) {
  return {zero_gradients(model), 0};
}

/// One momentum step on every parameter, weight decay folded into the
/// velocity:
///
///   v <- momentum * v - lr * (grad + weight_decay * w)
///   w <- w + v
///
/// with lr = lr_at(config, state.iteration); the iteration then advances by one.
template <typename Scalar>
void sgd_step(std::span<Tensor<Scalar>* const> params, std::span<const Tensor<Scalar>> grads,
              OptimizerState<Scalar>& state, const TrainConfig& config) {
  if (state.velocity.empty())
    for (const auto* p : params) state.velocity.emplace_back(p->shape());
  if (params.size() != grads.size() || params.size() != state.velocity.size())
    throw ShapeError("sgd_step: parameter, gradient and velocity counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i].shape() || params[i]->shape() != state.velocity[i].shape())
      throw ShapeError("sgd_step: shape mismatch for parameter " + std::to_string(i));
  const auto lr = static_cast<Scalar>(lr_at(config, state.iteration));
  const auto momentum = static_cast<Scalar>(config.momentum);
  const auto decay = static_cast<Scalar>(config.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i]->vec();
    auto& v = state.velocity[i].vec();
    v = momentum * v - lr * (grads[i].vec() + decay * w);
    w += v;
  }
  ++state.iteration;
}

template <typename Scalar>
void sgd_step(Network<Scalar>& model, const Gradients<Scalar>& grads, OptimizerState<Scalar>& state,
              const TrainConfig& config) {
  const auto params = model.parameters();
  sgd_step<Scalar>(std::span<Tensor<Scalar>* const>(params), std::span<const Tensor<Scalar>>(grads), state, config);
}

// Training loop -----------------------------------------------------------------

struct LogEntry {
  Index iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainCallbacks {
  std::function<void(const LogEntry&)> on_iteration;
  std::function<void(const std::filesystem::path&)> on_snapshot;
  std::function<void(const std::string&)> on_warning;
};

struct TrainResult {
  std::vector<LogEntry> log;
  std::size_t skipped_records = 0;
  Index epochs_started = 0;
};

/// "iter<TAB>lr<TAB>loss" with 9 significant digits.
inline std::string format_log_entry(const LogEntry& e) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g", static_cast<long long>(e.iteration), e.lr, e.loss);
  return buf;
}

inline std::filesystem::path snapshot_path(const std::filesystem::path& prefix, Index iteration) {
  return prefix.string() + "_iter_" + std::to_string(iteration) + ".dsbw";
}

/// Mini-batch SGD over the training split of the manifest.
///
/// Each epoch takes a fresh Fisher-Yates shuffle of all training records and
/// runs floor(N / batch) iterations; leftover records wait for the next
/// shuffle. A batch larger than the training set is clamped to N. Iteration i
/// augments with Rng(seed).split(2i) and draws dropout masks from
/// Rng(seed).split(2i + 1), so a fixed seed fixes the whole run.
template <typename Scalar>
TrainResult train(Network<Scalar>& model, const DatasetManifest& manifest, const TrainConfig& config,
                  const TrainCallbacks& callbacks = {}, const ImageLoader& loader = load_image) {
  config.validate();
  const auto train_records = manifest.split_indices(Split::train);
  if (train_records.empty()) throw DataError("training split is empty");
  for (const auto i : train_records)
    if (manifest.records[i].anp_index >= model.num_classes())
      throw IndexError("record '" + manifest.records[i].path + "' has label " +
                       std::to_string(manifest.records[i].anp_index) + " but the model has " +
                       std::to_string(model.num_classes()) + " classes");

  const auto n = static_cast<Index>(train_records.size());
  const Index batch = std::min(config.batch_size, n);
  if (batch < config.batch_size && callbacks.on_warning)
    callbacks.on_warning("batch size clamped to the " + std::to_string(n) + " training records");
  const Index per_epoch = n / batch;

  const Rng root(config.seed);
  Rng shuffle_rng = root.split(0xE90C);
  std::vector<std::size_t> order = train_records;
  OptimizerState<Scalar> state = make_optimizer_state(model);
  TrainResult result;
  std::filesystem::path last_snapshot;

  for (Index iter = 0; iter < config.max_iterations; ++iter) {
    const Index slot = iter % per_epoch;
    if (slot == 0) {
      order = train_records;
      for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
      ++result.epochs_started;
    }
    const std::span<const std::size_t> slice(order.data() + slot * batch, static_cast<std::size_t>(batch));
    Rng augment_rng = root.split(2 * static_cast<std::uint64_t>(iter));
    Rng dropout_rng = root.split(2 * static_cast<std::uint64_t>(iter) + 1);
    Batch b = make_batch(manifest, slice, Mode::train, model.channel_means, augment_rng, loader);
    result.skipped_records += b.skipped.size();
    if (callbacks.on_warning)
      for (const auto& w : b.warnings) callbacks.on_warning(w);

    Tensor<Scalar> images;
    if constexpr (std::is_same_v<Scalar, float>)
      images = std::move(b.images);
    else
      images = b.images.template cast<Scalar>();
    const auto lg = loss_and_gradients(model, images, std::span<const Index>(b.labels), Mode::train, dropout_rng);
    if (!std::isfinite(lg.mean_loss))
      throw NumericError("non-finite loss at iteration " + std::to_string(iter) + "; last good snapshot: " +
                         (last_snapshot.empty() ? std::string("none") : last_snapshot.string()));

    const LogEntry entry{iter, lr_at(config, state.iteration), lg.mean_loss};
    sgd_step(model, lg.gradients, state, config);
    result.log.push_back(entry);
    if (callbacks.on_iteration) callbacks.on_iteration(entry);

    if (config.snapshot_every > 0 && !config.snapshot_prefix.empty() && (iter + 1) % config.snapshot_every == 0) {
      last_snapshot = snapshot_path(config.snapshot_prefix, iter + 1);
      save_weights(model, last_snapshot);
      if (callbacks.on_snapshot) callbacks.on_snapshot(last_snapshot);
    }
  }
  return result;
}

}  // namespace sentinet
