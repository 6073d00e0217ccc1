// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>

#include "mipcnet/autograd.hpp"
#include "mipcnet/tensor.hpp"

namespace mipcnet::loss {

inline constexpr double kDiceEps = 1e-5;

// (B, H, W) labels -> (B, K, H, W) one-hot.
template <typename T>
Tensor<T> one_hot(const Tensor<int32_t>& labels, int64_t num_classes);

// Pixelwise mean of -log softmax(logits)[label], computed with log-sum-exp.
template <typename T>
ag::Var<T> cross_entropy(const ag::Var<T>& logits, const Tensor<int32_t>& labels);

// 1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps), sums over batch and
// space, classes from `first_class` (1 skips background).
template <typename T>
ag::Var<T> soft_dice_loss(const ag::Var<T>& probs, const Tensor<T>& onehot, int64_t first_class = 1,
                          double eps = kDiceEps);

template <typename T>
struct LossParts {
  ag::Var<T> total;  // 0.5 * ce + 0.5 * dice
  T ce = 0;
  T dice = 0;
};

template <typename T>
LossParts<T> combined_loss(const ag::Var<T>& logits, const Tensor<int32_t>& labels);

}  // namespace mipcnet::loss
