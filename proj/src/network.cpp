// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/network.hpp"

#include <cmath>

#include "mipcnet/errors.hpp"
#include "mipcnet/ops.hpp"

namespace mipcnet {

namespace {

void expect_shape(const Shape& actual, const Shape& expected, const std::string& stage) {
  if (actual != expected) {
    throw ValidationError(stage + ": expected shape " + shape_str(expected) + ", got " + shape_str(actual));
  }
}

}  // namespace

template <typename T>
FeatureBlock<T>::FeatureBlock(const Scope<T>& scope, int64_t channels, BlockKind kind, MipcVariant variant) {
  switch (kind) {
    case BlockKind::kMipc: impl.template emplace<MipcBlock<T>>(scope, channels, variant); break;
    case BlockKind::kPc: impl.template emplace<PcBlock<T>>(scope, channels); break;
    case BlockKind::kIdentity: break;
  }
}

template <typename T>
ag::Var<T> FeatureBlock<T>::operator()(const ag::Var<T>& x) const {
  if (const auto* m = std::get_if<MipcBlock<T>>(&impl)) return (*m)(x);
  if (const auto* p = std::get_if<PcBlock<T>>(&impl)) return (*p)(x);
  return x;
}

template <typename T>
BlockKind FeatureBlock<T>::kind() const {
  if (std::holds_alternative<MipcBlock<T>>(impl)) return BlockKind::kMipc;
  if (std::holds_alternative<PcBlock<T>>(impl)) return BlockKind::kPc;
  return BlockKind::kIdentity;
}

// ---------------------------------------------------------------------------

template <typename T>
TransformerLayer<T>::TransformerLayer(const Scope<T>& scope, const TransformerConfig& cfg)
    : norm_attn(scope.child("norm_attn"), cfg.hidden_dim),
      norm_mlp(scope.child("norm_mlp"), cfg.hidden_dim),
      query(scope.child("query"), cfg.hidden_dim, cfg.hidden_dim),
      key(scope.child("key"), cfg.hidden_dim, cfg.hidden_dim),
      value(scope.child("value"), cfg.hidden_dim, cfg.hidden_dim),
      proj(scope.child("proj"), cfg.hidden_dim, cfg.hidden_dim),
      fc1(scope.child("fc1"), cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio),
      fc2(scope.child("fc2"), cfg.hidden_dim * cfg.mlp_ratio, cfg.hidden_dim),
      heads(cfg.heads) {}

template <typename T>
ag::Var<T> TransformerLayer<T>::split_heads(const ag::Var<T>& x) const {
  const int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2) / heads;
  auto h = ag::permute(ag::reshape(x, {b, n, heads, d}), {0, 2, 1, 3});
  return ag::reshape(h, {b * heads, n, d});
}

template <typename T>
ag::Var<T> TransformerLayer<T>::attention_weights(const ag::Var<T>& tokens) const {
  auto normed = norm_attn(tokens);
  const T scale = T(1) / std::sqrt(static_cast<T>(tokens.dim(2) / heads));
  auto scores = ag::bmm(split_heads(query(normed)), split_heads(key(normed)), false, true);
  return ag::softmax(ag::scale(scores, scale), -1);
}

template <typename T>
ag::Var<T> TransformerLayer<T>::operator()(const ag::Var<T>& tokens) const {
  const int64_t b = tokens.dim(0), n = tokens.dim(1), dim = tokens.dim(2), d = dim / heads;
  auto normed = norm_attn(tokens);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  auto scores = ag::bmm(split_heads(query(normed)), split_heads(key(normed)), false, true);
  auto attn = ag::softmax(ag::scale(scores, scale), -1);
  auto ctx = ag::bmm(attn, split_heads(value(normed)));
  ctx = ag::reshape(ag::permute(ag::reshape(ctx, {b, heads, n, d}), {0, 2, 1, 3}), {b, n, dim});
  auto x = ag::add(tokens, proj(ctx));
  auto mlp = fc2(ag::gelu(fc1(norm_mlp(x))));
  return ag::add(x, mlp);
}

template <typename T>
StemStage<T>::StemStage(const Scope<T>& scope, int64_t in_channels, int64_t out_channels)
    : down(scope.child("down"), in_channels, out_channels, 3, 2),
      refine(scope.child("refine"), out_channels, out_channels, 3, 1) {}

template <typename T>
ag::Var<T> StemStage<T>::operator()(const ag::Var<T>& x) const {
  return refine(down(x));
}

template <typename T>
Encoder<T>::Encoder(const Scope<T>& scope, const ModelConfig& cfg) : cfg_(cfg) {
  int64_t in = cfg.in_channels;
  for (int i = 0; i < 3; ++i) {
    const int64_t out = cfg.skip_width(i + 1);
    stem[static_cast<size_t>(i)] = StemStage<T>(scope.child("stem" + std::to_string(i + 1)), in, out);
    in = out;
  }
  block = FeatureBlock<T>(scope.child("block"), in, cfg.block, cfg.mipc_variant);
  embed = Conv2d<T>(scope.child("embed"), in, cfg.transformer.hidden_dim, 2, 2, 0);
  position_embedding = scope.normal("position_embedding", {1, cfg.num_tokens(), cfg.transformer.hidden_dim}, 0.02);
  for (int64_t i = 0; i < cfg.transformer.depth; ++i) {
    layers.emplace_back(scope.child("layer" + std::to_string(i)), cfg.transformer);
  }
  final_norm = LayerNorm<T>(scope.child("final_norm"), cfg.transformer.hidden_dim);
}

template <typename T>
EncoderOutput<T> Encoder<T>::operator()(const ag::Var<T>& image) const {
  EncoderOutput<T> out;
  ag::Var<T> x = image;
  for (size_t i = 0; i < 3; ++i) {
    const Shape before = x.shape();
    x = stem[i](x);
    expect_shape(x.shape(), {before[0], cfg_.skip_width(static_cast<int>(i) + 1), before[2] / 2, before[3] / 2},
                 "stem stage " + std::to_string(i + 1));
    out.skips[i] = x;
  }
  x = block(x);
  x = embed(x);  // (B, hidden, g, g)
  const int64_t b = x.dim(0), d = x.dim(1), n = x.dim(2) * x.dim(3);
  auto tokens = ag::permute(ag::reshape(x, {b, d, n}), {0, 2, 1});
  tokens = ag::add(tokens, position_embedding);
  for (const auto& layer : layers) tokens = layer(tokens);
  out.tokens = final_norm(tokens);
  return out;
}

template <typename T>
SkipPipeline<T>::SkipPipeline(const Scope<T>& scope, const ModelConfig& cfg) : cfg_(cfg) {
  for (int level = 1; level <= 3; ++level) {
    const auto i = static_cast<size_t>(level - 1);
    if (cfg.use_da_skips) da[i].emplace(scope.child("da" + std::to_string(level)), cfg.skip_width(level));
    if (gl_injects_level(cfg.gl_placement, level)) {
      global_proj[i].emplace(scope.child("global_proj" + std::to_string(level)), cfg.skip_width(1),
                             cfg.skip_width(level), 1);
    }
  }
}

template <typename T>
std::array<ag::Var<T>, 3> SkipPipeline<T>::refine(const std::array<ag::Var<T>, 3>& skips) const {
  std::array<ag::Var<T>, 3> out;
  for (size_t i = 0; i < 3; ++i) out[i] = da[i] ? (*da[i])(skips[i]) : skips[i];
  return out;
}

template <typename T>
std::array<ag::Var<T>, 3> SkipPipeline<T>::inject(const std::array<ag::Var<T>, 3>& refined,
                                                  const ag::Var<T>& global) const {
  std::array<ag::Var<T>, 3> out = refined;
  for (size_t i = 0; i < 3; ++i) {
    if (!global_proj[i]) continue;
    const auto& target = refined[i];
    auto resized = ag::resize_bilinear(global, target.dim(2), target.dim(3));
    out[i] = ag::add(target, (*global_proj[i])(resized));
  }
  return out;
}

template <typename T>
std::array<ag::Var<T>, 3> SkipPipeline<T>::operator()(const std::array<ag::Var<T>, 3>& skips,
                                                      const std::optional<ag::Var<T>>& global) const {
  const bool wants_global = cfg_.gl_placement != GlPlacement::kNone;
  if (wants_global != global.has_value()) {
    throw ValidationError(wants_global ? "skip_pipeline: gl_placement " + to_string(cfg_.gl_placement) +
                                             " requires a global feature"
                                       : "skip_pipeline: global feature given but gl_placement is none");
  }
  auto refined = refine(skips);
  return global ? inject(refined, *global) : refined;
}

template <typename T>
UpBlock<T>::UpBlock(const Scope<T>& scope, int64_t in_channels, int64_t skip_channels, int64_t out_channels,
                    int stat_sets)
    : fuse(scope.child("fuse"), in_channels + skip_channels, out_channels, 3, 1, stat_sets),
      refine(scope.child("refine"), out_channels, out_channels, 3, 1, stat_sets) {}

template <typename T>
ag::Var<T> UpBlock<T>::operator()(const ag::Var<T>& x, const ag::Var<T>& skip, const char* stage) const {
  auto up = ag::resize_bilinear(x, x.dim(2) * 2, x.dim(3) * 2);
  if (skip.dim(0) != up.dim(0) || skip.dim(2) != up.dim(2) || skip.dim(3) != up.dim(3) ||
      skip.dim(1) != fuse.conv.weight.dim(1) - up.dim(1)) {
    throw ValidationError(std::string(stage) + ": skip " + shape_str(skip.shape()) +
                          " does not match upsampled feature " + shape_str(up.shape()));
  }
  return refine(fuse(ag::concat<T>({up, skip}, 1)));
}

template <typename T>
Decoder<T>::Decoder(const Scope<T>& scope, const ModelConfig& cfg) : cfg_(cfg) {
  const int64_t w = cfg.stem_base_width;
  const int slots = cfg.gl_placement == GlPlacement::kNone ? 1 : 2;
  bridge = ConvBnRelu<T>(scope.child("bridge"), cfg.transformer.hidden_dim, 4 * w, 3, 1, slots);
  ups[0] = UpBlock<T>(scope.child("up1"), 4 * w, cfg.skip_width(3), 4 * w, slots);
  ups[1] = UpBlock<T>(scope.child("up2"), 4 * w, cfg.skip_width(2), 2 * w, slots);
  ups[2] = UpBlock<T>(scope.child("up3"), 2 * w, cfg.skip_width(1), w, slots);
  head = Conv2d<T>(scope.child("head"), w, cfg.num_classes, 1);
}

template <typename T>
DecoderOutput<T> Decoder<T>::operator()(const ag::Var<T>& tokens, const std::array<ag::Var<T>, 3>& skips) const {
  const int64_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  const int64_t g = cfg_.grid_side();
  if (n != g * g || d != cfg_.transformer.hidden_dim) {
    throw ValidationError("decoder: tokens " + shape_str(tokens.shape()) + " inconsistent with config");
  }
  auto x = ag::reshape(ag::permute(tokens, {0, 2, 1}), {b, d, g, g});
  x = bridge(x);
  x = ups[0](x, skips[2], "decoder stage 1");
  x = ups[1](x, skips[1], "decoder stage 2");
  x = ups[2](x, skips[0], "decoder stage 3");
  DecoderOutput<T> out;
  out.post_up3 = x;
  out.logits = head(ag::resize_bilinear(x, x.dim(2) * 2, x.dim(3) * 2));
  return out;
}

template <typename T>
MipcNet<T>::MipcNet(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), store_(std::make_unique<ParamStore<T>>()) {
  cfg_.validate();
  Rng rng(seed);
  Scope<T> root{store_.get(), &rng, ""};
  encoder = Encoder<T>(root.child("encoder"), cfg_);
  skips = SkipPipeline<T>(root.child("skips"), cfg_);
  decoder = Decoder<T>(root.child("decoder"), cfg_);
  if (cfg_.gl_placement != GlPlacement::kNone) {
    residue.emplace(root.child("residue"), cfg_.skip_width(1), cfg_.block, cfg_.mipc_variant);
  }
}

template <typename T>
void MipcNet<T>::check_image(const ag::Var<T>& image) const {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.input_size || s[3] != cfg_.input_size || s[0] < 1) {
    throw ValidationError("model_forward: image shape " + shape_str(s) + " does not match (B, " +
                          std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.input_size) + ", " +
                          std::to_string(cfg_.input_size) + ")");
  }
  require_finite(image.value(), "image");
}

template <typename T>
ForwardTrace<T> MipcNet<T>::trace(const ag::Var<T>& image) const {
  check_image(image);
  ForwardTrace<T> t;
  t.encoder = encoder(image);
  t.refined_skips = skips.refine(t.encoder.skips);
  if (!residue) {
    t.final_skips = t.refined_skips;
    t.logits = decoder(t.encoder.tokens, t.final_skips).logits;
    return t;
  }
  DecoderOutput<T> first;
  {
    BnSlotGuard slot(1);
    first = decoder(t.encoder.tokens, t.refined_skips);
  }
  t.first_pass_post_up3 = first.post_up3;
  t.global_feature = (*residue)(first.post_up3);
  t.final_skips = skips.inject(t.refined_skips, *t.global_feature);
  t.logits = decoder(t.encoder.tokens, t.final_skips).logits;
  return t;
}

template <typename T>
ag::Var<T> MipcNet<T>::operator()(const ag::Var<T>& image) const {
  return trace(image).logits;
}

template <typename T>
Tensor<int32_t> argmax_labels(const Tensor<T>& logits) {
  const int64_t b = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  Tensor<int32_t> out({b, h, w});
  for (int64_t n = 0; n < b; ++n) {
    for (int64_t i = 0; i < h * w; ++i) {
      int32_t best = 0;
      T best_v = logits[(n * k) * h * w + i];
      for (int32_t c = 1; c < k; ++c) {
        const T v = logits[(n * k + c) * h * w + i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out[n * h * w + i] = best;
    }
  }
  return out;
}

#define MIPCNET_INSTANTIATE_NETWORK(T)      \
  template class FeatureBlock<T>;           \
  template class TransformerLayer<T>;       \
  template class StemStage<T>;              \
  template class Encoder<T>;                \
  template class SkipPipeline<T>;           \
  template class UpBlock<T>;                \
  template class Decoder<T>;                \
  template class MipcNet<T>;                \
  template Tensor<int32_t> argmax_labels(const Tensor<T>&);

MIPCNET_INSTANTIATE_NETWORK(float)
MIPCNET_INSTANTIATE_NETWORK(double)

}  // namespace mipcnet
