// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mipcnet/config.hpp"
#include "mipcnet/data.hpp"
#include "mipcnet/metrics.hpp"
#include "mipcnet/network.hpp"

namespace mipcnet::train {

inline constexpr const char* kVersion = "mipcnet 0.1.0";
inline constexpr const char* kCheckpointMagic = "mipcnet-ckpt-v1";

enum class LrSchedule { kConstant, kPoly };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int64_t batch_size = 4;
  int64_t max_iterations = 2000;
  uint64_t seed = 0;
  LrSchedule schedule = LrSchedule::kConstant;
  int64_t eval_every = 0;  // 0 disables periodic evaluation
  bool augment = false;

  // batch 24 for "paper", 4 otherwise.
  static TrainConfig for_preset(const std::string& preset);
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
};

// lr * (1 - it / max_it)^0.9 for poly, lr otherwise.
double learning_rate(const TrainConfig& cfg, int64_t iteration);

template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;  // lazily sized to the parameter list
};

// g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v. An empty grad
// counts as zero. Returns false, touching nothing, if any gradient is not
// finite.
template <typename T>
bool sgd_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads, SgdState<T>& state,
              double lr, double momentum, double weight_decay);

// Applies sgd_step to every parameter of the store.
template <typename T>
bool sgd_step(ParamStore<T>& store, SgdState<T>& state, double lr, double momentum, double weight_decay);

struct LogEntry {
  int64_t iteration = 0;
  double loss = 0, ce = 0, dice = 0, lr = 0;
  bool skipped = false;  // non-finite loss or gradient; no update made
};

struct TrainLog {
  std::vector<LogEntry> entries;
  std::vector<std::pair<int64_t, metrics::MetricsReport>> evals;
  double wall_seconds = 0;
  nlohmann::json config;  // {"model": ..., "train": ...}
  std::string version = kVersion;

  // Header line, one line per iteration, one per evaluation.
  std::string to_jsonl() const;
  void write_jsonl(const std::filesystem::path& path) const;
  // Means of consecutive, non-overlapping windows of finite losses.
  std::vector<double> window_means(int64_t window) const;
};

using Model = MipcNet<float>;

// Stacks samples (already at model resolution) into a (B, C, S, S) image
// tensor and (B, S, S) labels.
std::pair<Tensor<float>, Tensor<int32_t>> make_batch(const std::vector<const data::Sample*>& samples);

// Preprocesses every sample to the model's input size and checks channels
// and class count against the config.
std::vector<data::Sample> prepare(const ModelConfig& cfg, const data::Dataset& ds);

using ProgressFn = std::function<void(const LogEntry&)>;

// Trains `model` in place. The epoch order is a seeded permutation; the tail
// that does not fill a batch is dropped. Batch-norm statistics are
// recalibrated on the training set at the end.
TrainLog train(Model& model, const TrainConfig& cfg, const data::Dataset& ds, const ProgressFn& progress = {},
               const data::Dataset* eval_ds = nullptr);

struct TrainResult {
  std::unique_ptr<Model> model;
  TrainLog log;
};

// Builds the model from `seed`, then trains it.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const data::Dataset& ds,
                  const ProgressFn& progress = {}, const data::Dataset* eval_ds = nullptr);

// Re-estimates batch-norm running statistics with the current weights: one
// no-grad pass over `samples` in batches, averaging the batch statistics.
void recalibrate_batch_norm(Model& model, const std::vector<data::Sample>& samples, int64_t batch_size);

// Eval mode, sorted case ids, per-case reports aggregated per class.
metrics::MetricsReport evaluate(Model& model, const data::Dataset& ds);

// Batch-1 prediction, (H, W) labels at the model's resolution.
Tensor<int32_t> predict(Model& model, const data::Sample& preprocessed);

void save_checkpoint(const Model& model, const std::filesystem::path& path, const nlohmann::json& meta = {});
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

}  // namespace mipcnet::train
