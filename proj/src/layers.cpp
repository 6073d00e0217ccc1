// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/layers.hpp"

#include <algorithm>
#include <cmath>

#include "mipcnet/errors.hpp"
#include "mipcnet/ops.hpp"

namespace mipcnet {

template <typename T>
ag::Var<T> ParamStore<T>::add_param(const std::string& name, Tensor<T> init) {
  if (param_index_.count(name) || buffer_storage_.count(name)) {
    throw ValidationError("duplicate parameter name " + name);
  }
  Var v(std::move(init), true);
  param_index_[name] = params_.size();
  params_.emplace_back(name, v);
  return v;
}

template <typename T>
Tensor<T>& ParamStore<T>::add_buffer(const std::string& name, Tensor<T> init) {
  if (param_index_.count(name) || buffer_storage_.count(name)) {
    throw ValidationError("duplicate buffer name " + name);
  }
  auto owned = std::make_unique<Tensor<T>>(std::move(init));
  Tensor<T>* raw = owned.get();
  buffer_storage_[name] = std::move(owned);
  buffer_order_.emplace_back(name, raw);
  return *raw;
}

template <typename T>
ag::Var<T> ParamStore<T>::param(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ValidationError("unknown parameter " + name);
  return params_[it->second].second;
}

template <typename T>
Tensor<T>* ParamStore<T>::buffer(const std::string& name) const {
  auto it = buffer_storage_.find(name);
  return it == buffer_storage_.end() ? nullptr : it->second.get();
}

template <typename T>
int64_t ParamStore<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, v] : params_) v.zero_grad();
}

template <typename T>
ag::Var<T> Scope<T>::kaiming_uniform(const std::string& name, Shape shape, int64_t fan_in) const {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<int64_t>(fan_in, 1)));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng->uniform(-bound, bound));
  return store->add_param(qualify(name), std::move(t));
}

template <typename T>
ag::Var<T> Scope<T>::normal(const std::string& name, Shape shape, double stddev) const {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(stddev * rng->normal());
  return store->add_param(qualify(name), std::move(t));
}

template <typename T>
ag::Var<T> Scope<T>::constant(const std::string& name, Shape shape, T value) const {
  return store->add_param(qualify(name), Tensor<T>(std::move(shape), value));
}

template <typename T>
Conv2d<T>::Conv2d(const Scope<T>& scope, int64_t in_channels, int64_t out_channels, int kernel, int stride_,
                  int padding_, bool with_bias)
    : stride(stride_), padding(padding_ < 0 ? kernel / 2 : padding_) {
  weight = scope.kaiming_uniform("weight", {out_channels, in_channels, kernel, kernel},
                                 in_channels * kernel * kernel);
  if (with_bias) bias = scope.constant("bias", {out_channels}, T(0));
}

template <typename T>
ag::Var<T> Conv2d<T>::operator()(const ag::Var<T>& x) const {
  return ag::conv2d(x, weight, bias, stride, padding);
}

namespace {
thread_local int g_bn_slot = 0;
}  // namespace

int bn_slot() { return g_bn_slot; }

BnSlotGuard::BnSlotGuard(int slot) : previous_(g_bn_slot) { g_bn_slot = slot; }
BnSlotGuard::~BnSlotGuard() { g_bn_slot = previous_; }

template <typename T>
BatchNorm2d<T>::BatchNorm2d(const Scope<T>& scope, int64_t channels, int stat_sets) : store(scope.store) {
  gamma = scope.constant("gamma", {channels}, T(1));
  beta = scope.constant("beta", {channels}, T(0));
  for (int k = 0; k < std::max(1, stat_sets); ++k) {
    const std::string suffix = k == 0 ? "" : "_slot" + std::to_string(k);
    slot_means.push_back(&scope.store->add_buffer(scope.qualify("running_mean" + suffix), Tensor<T>({channels}, T(0))));
    slot_vars.push_back(&scope.store->add_buffer(scope.qualify("running_var" + suffix), Tensor<T>({channels}, T(1))));
  }
  running_mean = slot_means[0];
  running_var = slot_vars[0];
}

template <typename T>
ag::Var<T> BatchNorm2d<T>::operator()(const ag::Var<T>& x) const {
  const int slot = bn_slot();
  const size_t k = slot > 0 && static_cast<size_t>(slot) < slot_means.size() ? static_cast<size_t>(slot) : 0;
  return ag::batch_norm(x, gamma, beta, *slot_means[k], *slot_vars[k], store->training(),
                        store->bn_momentum().value_or(momentum), eps);
}

template <typename T>
Linear<T>::Linear(const Scope<T>& scope, int64_t in_features, int64_t out_features, bool with_bias) {
  weight = scope.kaiming_uniform("weight", {out_features, in_features}, in_features);
  if (with_bias) bias = scope.constant("bias", {out_features}, T(0));
}

template <typename T>
ag::Var<T> Linear<T>::operator()(const ag::Var<T>& x) const {
  return ag::linear(x, weight, bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(const Scope<T>& scope, int64_t dim) {
  gamma = scope.constant("gamma", {dim}, T(1));
  beta = scope.constant("beta", {dim}, T(0));
}

template <typename T>
ag::Var<T> LayerNorm<T>::operator()(const ag::Var<T>& x) const {
  return ag::layer_norm(x, gamma, beta, eps);
}

template <typename T>
ConvBnRelu<T>::ConvBnRelu(const Scope<T>& scope, int64_t in_channels, int64_t out_channels, int kernel,
                          int stride, int stat_sets)
    : conv(scope.child("conv"), in_channels, out_channels, kernel, stride, -1, false),
      bn(scope.child("bn"), out_channels, stat_sets) {}

template <typename T>
ag::Var<T> ConvBnRelu<T>::operator()(const ag::Var<T>& x) const {
  return ag::relu(bn(conv(x)));
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Scope<float>;
template struct Scope<double>;
template class Conv2d<float>;
template class Conv2d<double>;
template class BatchNorm2d<float>;
template class BatchNorm2d<double>;
template class Linear<float>;
template class Linear<double>;
template class LayerNorm<float>;
template class LayerNorm<double>;
template class ConvBnRelu<float>;
template class ConvBnRelu<double>;

}  // namespace mipcnet
