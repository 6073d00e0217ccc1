// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <array>
#include <string>

#include "mipcnet/layers.hpp"

namespace mipcnet {

// Which branch of each attention part supplies the features (primary) and
// which one supplies the sigmoid gate (auxiliary).
struct MipcVariant {
  enum class PartA { kPam, kChannelPool };
  enum class PartC { kCam, kPositionPool };

  PartA part_a = PartA::kPam;
  PartC part_c = PartC::kCam;

  // The four rows of the mixing ablation, default first.
  static std::array<MipcVariant, 4> all();
  std::string name() const;  // e.g. "PAM+ChannelPool/CAM+PositionPool"
  std::string key() const;   // e.g. "pam-cam", used in configs
  static MipcVariant parse(const std::string& key);

  bool operator==(const MipcVariant&) const = default;
};

// Learned gates, or both gates replaced by the constant 1.
enum class GateMode { kLearned, kForcedOne };

// Self-attention over the H*W positions: query/key 1x1 projections reduced to
// C/8 channels, a full-width value projection, and out = gamma * attn + x.
template <typename T>
class PositionAttention {
 public:
  PositionAttention() = default;
  PositionAttention(const Scope<T>& scope, int64_t channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;
  // Row-softmaxed (B, HW, HW) affinity.
  ag::Var<T> affinity(const ag::Var<T>& x) const;

  Conv2d<T> query, key, value;
  ag::Var<T> gamma;  // shape {1}, zero at init
};

// Self-attention over channels: (C x C) affinity of the flattened features,
// out = gamma * (attn . x) + x.
template <typename T>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  explicit ChannelAttention(const Scope<T>& scope);

  ag::Var<T> operator()(const ag::Var<T>& x) const;
  ag::Var<T> affinity(const ag::Var<T>& x) const;

  ag::Var<T> gamma;
};

// Spatial average per channel, FC(C -> C/r), ReLU, FC(C/r -> C), sigmoid.
// Output shape (B, C, 1, 1).
template <typename T>
class ChannelGate {
 public:
  static constexpr int64_t kReduction = 16;

  ChannelGate() = default;
  ChannelGate(const Scope<T>& scope, int64_t channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  Linear<T> squeeze, expand;
};

// Per-position max and mean over channels, 7x7 conv to one map, sigmoid.
// Output shape (B, 1, H, W).
template <typename T>
class PositionGate {
 public:
  static constexpr int kKernel = 7;

  PositionGate() = default;
  explicit PositionGate(const Scope<T>& scope);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  Conv2d<T> conv;
};

// ReLU(x + BN(conv(ReLU(BN(conv(x)))))) with 3x3 convs.
template <typename T>
class ResidualTail {
 public:
  ResidualTail() = default;
  ResidualTail(const Scope<T>& scope, int64_t channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  Conv2d<T> conv_a, conv_b;
  BatchNorm2d<T> bn_a, bn_b;
};

// Conv(Conv_a(x) * Conv_c(x)): the convolutional branch shared by the MIPC and
// PC blocks.
template <typename T>
class ConvProductBranch {
 public:
  ConvProductBranch() = default;
  ConvProductBranch(const Scope<T>& scope, int64_t channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  Conv2d<T> conv_a, conv_c, conv_out;
};

// Mutual-inclusion block: position-dominant part gated by a channel summary,
// channel-dominant part gated by a position summary, a convolutional product
// branch, summed and passed through the residual tail.
template <typename T>
class MipcBlock {
 public:
  MipcBlock() = default;
  MipcBlock(const Scope<T>& scope, int64_t channels, MipcVariant variant = {});

  ag::Var<T> operator()(const ag::Var<T>& x, GateMode mode = GateMode::kLearned) const;

  ag::Var<T> position_part(const ag::Var<T>& x, GateMode mode = GateMode::kLearned) const;  // beta
  ag::Var<T> channel_part(const ag::Var<T>& x, GateMode mode = GateMode::kLearned) const;   // alpha
  ag::Var<T> conv_part(const ag::Var<T>& x) const { return conv_branch(x); }                 // omega

  MipcVariant variant;
  PositionAttention<T> pam;
  ChannelAttention<T> cam;
  ChannelGate<T> channel_gate;
  PositionGate<T> position_gate;
  ConvProductBranch<T> conv_branch;
  ResidualTail<T> tail;
};

// Ablation baseline without mutual inclusion: tail(PAM(x) + CAM(x) + omega).
template <typename T>
class PcBlock {
 public:
  PcBlock() = default;
  PcBlock(const Scope<T>& scope, int64_t channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  PositionAttention<T> pam;
  ChannelAttention<T> cam;
  ConvProductBranch<T> conv_branch;
  ResidualTail<T> tail;
};

// Skip-connection refiner: conv->PAM->conv plus conv->CAM->conv.
template <typename T>
class DaBlock {
 public:
  DaBlock() = default;
  DaBlock(const Scope<T>& scope, int64_t channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  Conv2d<T> pam_in, pam_out, cam_in, cam_out;
  PositionAttention<T> pam;
  ChannelAttention<T> cam;
};

// Sums the three part outputs, rejecting mismatched shapes.
template <typename T>
ag::Var<T> sum_parts(const ag::Var<T>& alpha, const ag::Var<T>& beta, const ag::Var<T>& omega);

}  // namespace mipcnet
