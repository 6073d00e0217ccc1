// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/attention.hpp"

#include <algorithm>

#include "mipcnet/errors.hpp"
#include "mipcnet/ops.hpp"

namespace mipcnet {

namespace {

template <typename T>
void check_feature_map(const ag::Var<T>& x, const char* op) {
  if (x.shape().size() != 4) {
    throw ValidationError(std::string(op) + ": expected (B, C, H, W), got " + shape_str(x.shape()));
  }
  for (int64_t d : x.shape()) {
    if (d < 1) throw ValidationError(std::string(op) + ": empty axis in " + shape_str(x.shape()));
  }
  require_finite(x.value(), std::string(op) + " input");
}

template <typename T>
ag::Var<T> ones_like_gate(const Shape& shape) {
  return ag::Var<T>(Tensor<T>(shape, T(1)));
}

}  // namespace

std::array<MipcVariant, 4> MipcVariant::all() {
  using A = PartA;
  using C = PartC;
  return {MipcVariant{A::kPam, C::kCam}, MipcVariant{A::kPam, C::kPositionPool},
          MipcVariant{A::kChannelPool, C::kCam}, MipcVariant{A::kChannelPool, C::kPositionPool}};
}

std::string MipcVariant::name() const {
  const std::string a = part_a == PartA::kPam ? "PAM+ChannelPool" : "ChannelPool+PAM";
  const std::string c = part_c == PartC::kCam ? "CAM+PositionPool" : "PositionPool+CAM";
  return a + "/" + c;
}

std::string MipcVariant::key() const {
  return std::string(part_a == PartA::kPam ? "pam" : "channelpool") + "-" +
         (part_c == PartC::kCam ? "cam" : "positionpool");
}

MipcVariant MipcVariant::parse(const std::string& key) {
  for (const auto& v : all()) {
    if (v.key() == key) return v;
  }
  throw ValidationError("unknown mipc_variant '" + key +
                        "' (expected pam-cam, pam-positionpool, channelpool-cam, channelpool-positionpool)");
}

// ---------------------------------------------------------------------------

template <typename T>
PositionAttention<T>::PositionAttention(const Scope<T>& scope, int64_t channels) {
  const int64_t reduced = std::max<int64_t>(1, channels / 8);
  query = Conv2d<T>(scope.child("query"), channels, reduced, 1);
  key = Conv2d<T>(scope.child("key"), channels, reduced, 1);
  value = Conv2d<T>(scope.child("value"), channels, channels, 1);
  gamma = scope.constant("gamma", {1}, T(0));
}

template <typename T>
ag::Var<T> PositionAttention<T>::affinity(const ag::Var<T>& x) const {
  const int64_t b = x.dim(0), n = x.dim(2) * x.dim(3);
  auto q = ag::reshape(query(x), {b, query.weight.dim(0), n});
  auto k = ag::reshape(key(x), {b, key.weight.dim(0), n});
  return ag::softmax(ag::bmm(q, k, /*transpose_a=*/true), -1);
}

template <typename T>
ag::Var<T> PositionAttention<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "pam_forward");
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  auto attn = affinity(x);
  auto v = ag::reshape(value(x), {b, c, n});
  auto out = ag::reshape(ag::bmm(v, attn, false, /*transpose_b=*/true), x.shape());
  return ag::add(ag::mul(gamma, out), x);
}

template <typename T>
ChannelAttention<T>::ChannelAttention(const Scope<T>& scope) {
  gamma = scope.constant("gamma", {1}, T(0));
}

template <typename T>
ag::Var<T> ChannelAttention<T>::affinity(const ag::Var<T>& x) const {
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  auto flat = ag::reshape(x, {b, c, n});
  return ag::softmax(ag::bmm(flat, flat, false, /*transpose_b=*/true), -1);
}

template <typename T>
ag::Var<T> ChannelAttention<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "cam_forward");
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  auto flat = ag::reshape(x, {b, c, n});
  auto attn = ag::softmax(ag::bmm(flat, flat, false, true), -1);
  auto out = ag::reshape(ag::bmm(attn, flat), x.shape());
  return ag::add(ag::mul(gamma, out), x);
}

template <typename T>
ChannelGate<T>::ChannelGate(const Scope<T>& scope, int64_t channels) {
  const int64_t hidden = std::max<int64_t>(1, channels / kReduction);
  squeeze = Linear<T>(scope.child("squeeze"), channels, hidden);
  expand = Linear<T>(scope.child("expand"), hidden, channels);
}

template <typename T>
ag::Var<T> ChannelGate<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "channel_gate");
  const int64_t b = x.dim(0), c = x.dim(1);
  auto pooled = ag::reshape(ag::mean_axis(ag::mean_axis(x, 3), 2), {b, c});
  auto gate = ag::sigmoid(expand(ag::relu(squeeze(pooled))));
  return ag::reshape(gate, {b, c, 1, 1});
}

template <typename T>
PositionGate<T>::PositionGate(const Scope<T>& scope) : conv(scope.child("conv"), 2, 1, kKernel) {}

template <typename T>
ag::Var<T> PositionGate<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "position_gate");
  auto pooled = ag::concat<T>({ag::max_axis(x, 1), ag::mean_axis(x, 1)}, 1);
  return ag::sigmoid(conv(pooled));
}

template <typename T>
ResidualTail<T>::ResidualTail(const Scope<T>& scope, int64_t channels)
    : conv_a(scope.child("conv_a"), channels, channels, 3),
      conv_b(scope.child("conv_b"), channels, channels, 3),
      bn_a(scope.child("bn_a"), channels),
      bn_b(scope.child("bn_b"), channels) {}

template <typename T>
ag::Var<T> ResidualTail<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "residual_tail");
  auto y = ag::relu(bn_a(conv_a(x)));
  y = bn_b(conv_b(y));
  return ag::relu(ag::add(x, y));
}

template <typename T>
ConvProductBranch<T>::ConvProductBranch(const Scope<T>& scope, int64_t channels)
    : conv_a(scope.child("conv_a"), channels, channels, 3),
      conv_c(scope.child("conv_c"), channels, channels, 3),
      conv_out(scope.child("conv_out"), channels, channels, 3) {}

template <typename T>
ag::Var<T> ConvProductBranch<T>::operator()(const ag::Var<T>& x) const {
  return conv_out(ag::mul(conv_a(x), conv_c(x)));
}

template <typename T>
ag::Var<T> sum_parts(const ag::Var<T>& alpha, const ag::Var<T>& beta, const ag::Var<T>& omega) {
  if (alpha.shape() != beta.shape() || alpha.shape() != omega.shape()) {
    throw ValidationError("mipc_forward: part shapes differ (alpha " + shape_str(alpha.shape()) + ", beta " +
                          shape_str(beta.shape()) + ", omega " + shape_str(omega.shape()) +
                          "); the variant is mis-wired");
  }
  return ag::add(ag::add(alpha, beta), omega);
}

template <typename T>
MipcBlock<T>::MipcBlock(const Scope<T>& scope, int64_t channels, MipcVariant variant_)
    : variant(variant_),
      pam(scope.child("pam"), channels),
      cam(scope.child("cam")),
      channel_gate(scope.child("channel_gate"), channels),
      position_gate(scope.child("position_gate")),
      conv_branch(scope.child("part_b"), channels),
      tail(scope.child("tail"), channels) {}

template <typename T>
ag::Var<T> MipcBlock<T>::position_part(const ag::Var<T>& x, GateMode mode) const {
  const int64_t b = x.dim(0), c = x.dim(1);
  const bool forced = mode == GateMode::kForcedOne;
  if (variant.part_a == MipcVariant::PartA::kPam) {
    auto features = pam(x);
    auto gate = forced ? ones_like_gate<T>({b, c, 1, 1}) : channel_gate(x);
    return ag::mul(gate, features);
  }
  // ChannelPool primary: channel-recalibrated features gated by a PAM-derived map.
  auto features = ag::mul(channel_gate(x), x);
  auto gate = forced ? ones_like_gate<T>(x.shape()) : ag::sigmoid(pam(x));
  return ag::mul(gate, features);
}

template <typename T>
ag::Var<T> MipcBlock<T>::channel_part(const ag::Var<T>& x, GateMode mode) const {
  const int64_t b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const bool forced = mode == GateMode::kForcedOne;
  if (variant.part_c == MipcVariant::PartC::kCam) {
    auto features = cam(x);
    auto gate = forced ? ones_like_gate<T>({b, 1, h, w}) : position_gate(x);
    return ag::mul(gate, features);
  }
  // PositionPool primary: spatially reweighted features gated by a CAM-derived map.
  auto features = ag::mul(position_gate(x), x);
  auto gate = forced ? ones_like_gate<T>(x.shape()) : ag::sigmoid(cam(x));
  return ag::mul(gate, features);
}

template <typename T>
ag::Var<T> MipcBlock<T>::operator()(const ag::Var<T>& x, GateMode mode) const {
  check_feature_map(x, "mipc_forward");
  auto beta = position_part(x, mode);
  auto omega = conv_branch(x);
  auto alpha = channel_part(x, mode);
  return tail(sum_parts(alpha, beta, omega));
}

template <typename T>
PcBlock<T>::PcBlock(const Scope<T>& scope, int64_t channels)
    : pam(scope.child("pam"), channels),
      cam(scope.child("cam")),
      conv_branch(scope.child("part_b"), channels),
      tail(scope.child("tail"), channels) {}

template <typename T>
ag::Var<T> PcBlock<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "pc_block_forward");
  return tail(sum_parts(cam(x), pam(x), conv_branch(x)));
}

template <typename T>
DaBlock<T>::DaBlock(const Scope<T>& scope, int64_t channels)
    : pam_in(scope.child("pam_in"), channels, channels, 3),
      pam_out(scope.child("pam_out"), channels, channels, 3),
      cam_in(scope.child("cam_in"), channels, channels, 3),
      cam_out(scope.child("cam_out"), channels, channels, 3),
      pam(scope.child("pam"), channels),
      cam(scope.child("cam")) {}

template <typename T>
ag::Var<T> DaBlock<T>::operator()(const ag::Var<T>& x) const {
  check_feature_map(x, "da_block_forward");
  auto p = pam_out(pam(pam_in(x)));
  auto c = cam_out(cam(cam_in(x)));
  return ag::add(p, c);
}

#define MIPCNET_INSTANTIATE_ATTENTION(T)                                                        \
  template class PositionAttention<T>;                                                          \
  template class ChannelAttention<T>;                                                           \
  template class ChannelGate<T>;                                                                \
  template class PositionGate<T>;                                                               \
  template class ResidualTail<T>;                                                               \
  template class ConvProductBranch<T>;                                                          \
  template class MipcBlock<T>;                                                                  \
  template class PcBlock<T>;                                                                    \
  template class DaBlock<T>;                                                                    \
  template ag::Var<T> sum_parts(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&);

MIPCNET_INSTANTIATE_ATTENTION(float)
MIPCNET_INSTANTIATE_ATTENTION(double)

}  // namespace mipcnet
