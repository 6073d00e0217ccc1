// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <vector>

#include "mipcnet/autograd.hpp"

// Differentiable tensor operations. Every op returns a fresh Var and, when
// recording, a closure that propagates gradients to its inputs.
namespace mipcnet::ag {

// Elementwise with numpy-style broadcasting (trailing-axis alignment, size-1
// axes stretch).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);

template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> gelu(const Var<T>& x);

// Full reductions to shape {1}.
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

// Reductions over one axis, keeping it with size 1.
template <typename T> Var<T> mean_axis(const Var<T>& x, int axis);
template <typename T> Var<T> max_axis(const Var<T>& x, int axis);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<int>& perm);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);

// x: (B, Cin, H, W); weight: (Cout, Cin, k, k); bias: (Cout) or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int padding);

// Per-channel normalization of (B, C, H, W). In training mode batch
// statistics are used and the running buffers are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum, T eps);

// x: (..., in); weight: (out, in); bias: (out) or undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Normalizes over the last axis.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

// Batched matmul: a (B, M, K) and b (B, K, N) before the optional transposes.
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_a = false, bool transpose_b = false);

template <typename T> Var<T> softmax(const Var<T>& x, int axis);

// Bilinear resampling of (B, C, H, W), half-pixel centers (align_corners off).
template <typename T> Var<T> resize_bilinear(const Var<T>& x, int64_t out_h, int64_t out_w);

}  // namespace mipcnet::ag
