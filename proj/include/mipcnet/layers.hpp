// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mipcnet/autograd.hpp"
#include "mipcnet/rng.hpp"

namespace mipcnet {

// Owns every learnable array and non-learnable buffer of a model under
// hierarchical dotted names ("encoder.stem1.conv_a.weight").
template <typename T>
class ParamStore {
 public:
  using Var = ag::Var<T>;

  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Var add_param(const std::string& name, Tensor<T> init);
  Tensor<T>& add_buffer(const std::string& name, Tensor<T> init);

  const std::vector<std::pair<std::string, Var>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>*>>& buffers() const { return buffer_order_; }

  Var param(const std::string& name) const;
  Tensor<T>* buffer(const std::string& name) const;

  int64_t parameter_count() const;
  void zero_grad();

  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

  // When set, every batch-norm layer uses this running-stat momentum.
  std::optional<T> bn_momentum() const { return bn_momentum_; }
  void set_bn_momentum(std::optional<T> m) { bn_momentum_ = m; }

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::map<std::string, size_t> param_index_;
  std::map<std::string, std::unique_ptr<Tensor<T>>> buffer_storage_;
  std::vector<std::pair<std::string, Tensor<T>*>> buffer_order_;
  bool training_ = true;
  std::optional<T> bn_momentum_;
};

// Name prefix + store + initializer randomness, handed down while building.
template <typename T>
struct Scope {
  ParamStore<T>* store;
  Rng* rng;
  std::string prefix;

  Scope child(const std::string& name) const { return {store, rng, prefix.empty() ? name : prefix + "." + name}; }
  std::string qualify(const std::string& name) const { return prefix.empty() ? name : prefix + "." + name; }

  ag::Var<T> kaiming_uniform(const std::string& name, Shape shape, int64_t fan_in) const;
  ag::Var<T> normal(const std::string& name, Shape shape, double stddev) const;
  ag::Var<T> constant(const std::string& name, Shape shape, T value) const;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const Scope<T>& scope, int64_t in_channels, int64_t out_channels, int kernel, int stride = 1,
         int padding = -1, bool bias = true);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  ag::Var<T> weight;
  ag::Var<T> bias;  // undefined when constructed without bias
  int stride = 1;
  int padding = 0;
};

// Selects which running-statistics slot batch-norm layers use on this
// thread; layers with fewer slots fall back to slot 0.
int bn_slot();

class BnSlotGuard {
 public:
  explicit BnSlotGuard(int slot);
  ~BnSlotGuard();
  BnSlotGuard(const BnSlotGuard&) = delete;
  BnSlotGuard& operator=(const BnSlotGuard&) = delete;

 private:
  int previous_;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  // stat_sets > 1 keeps separate running statistics per slot (see
  // BnSlotGuard) while sharing gamma and beta.
  BatchNorm2d(const Scope<T>& scope, int64_t channels, int stat_sets = 1);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  ag::Var<T> gamma, beta;
  Tensor<T>* running_mean = nullptr;  // slot 0
  Tensor<T>* running_var = nullptr;
  std::vector<Tensor<T>*> slot_means, slot_vars;
  const ParamStore<T>* store = nullptr;
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const Scope<T>& scope, int64_t in_features, int64_t out_features, bool bias = true);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  ag::Var<T> weight, bias;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const Scope<T>& scope, int64_t dim);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  ag::Var<T> gamma, beta;
  T eps = T(1e-6);
};

// conv -> batch-norm -> ReLU
template <typename T>
class ConvBnRelu {
 public:
  ConvBnRelu() = default;
  ConvBnRelu(const Scope<T>& scope, int64_t in_channels, int64_t out_channels, int kernel, int stride = 1,
             int stat_sets = 1);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  Conv2d<T> conv;
  BatchNorm2d<T> bn;
};

}  // namespace mipcnet
