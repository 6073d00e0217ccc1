// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <array>
#include <memory>
#include <optional>
#include <variant>
#include <vector>

#include "mipcnet/attention.hpp"
#include "mipcnet/config.hpp"
#include "mipcnet/layers.hpp"

namespace mipcnet {

// MIPC, PC, or pass-through, chosen by ModelConfig::block.
template <typename T>
class FeatureBlock {
 public:
  FeatureBlock() = default;
  FeatureBlock(const Scope<T>& scope, int64_t channels, BlockKind kind, MipcVariant variant);

  ag::Var<T> operator()(const ag::Var<T>& x) const;
  BlockKind kind() const;

  std::variant<std::monostate, MipcBlock<T>, PcBlock<T>> impl;
};

// Pre-norm multi-head self-attention and GELU MLP, both with residuals.
template <typename T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(const Scope<T>& scope, const TransformerConfig& cfg);

  ag::Var<T> operator()(const ag::Var<T>& tokens) const;
  // Softmaxed attention weights, (B * heads, N, N), for the normed input.
  ag::Var<T> attention_weights(const ag::Var<T>& tokens) const;

  LayerNorm<T> norm_attn, norm_mlp;
  Linear<T> query, key, value, proj, fc1, fc2;
  int64_t heads = 1;

 private:
  ag::Var<T> split_heads(const ag::Var<T>& x) const;
};

// Halve H and W, set the width: 3x3 stride-2 conv block then a 3x3 conv block.
template <typename T>
class StemStage {
 public:
  StemStage() = default;
  StemStage(const Scope<T>& scope, int64_t in_channels, int64_t out_channels);

  ag::Var<T> operator()(const ag::Var<T>& x) const;

  ConvBnRelu<T> down, refine;
};

template <typename T>
struct EncoderOutput {
  ag::Var<T> tokens;               // (B, N, hidden)
  std::array<ag::Var<T>, 3> skips; // strides 2, 4, 8
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const Scope<T>& scope, const ModelConfig& cfg);

  EncoderOutput<T> operator()(const ag::Var<T>& image) const;

  std::array<StemStage<T>, 3> stem;
  FeatureBlock<T> block;
  Conv2d<T> embed;  // 2x2, stride 2: stride 8 -> stride 16
  ag::Var<T> position_embedding;
  std::vector<TransformerLayer<T>> layers;
  LayerNorm<T> final_norm;

 private:
  ModelConfig cfg_;
};

// DA refinement of the three skips and the global-feature injection.
template <typename T>
class SkipPipeline {
 public:
  SkipPipeline() = default;
  SkipPipeline(const Scope<T>& scope, const ModelConfig& cfg);

  std::array<ag::Var<T>, 3> refine(const std::array<ag::Var<T>, 3>& skips) const;
  // Adds the resized, 1x1-projected global feature to each selected level.
  std::array<ag::Var<T>, 3> inject(const std::array<ag::Var<T>, 3>& refined, const ag::Var<T>& global) const;
  // refine + inject; `global` must be defined iff placement is not none.
  std::array<ag::Var<T>, 3> operator()(const std::array<ag::Var<T>, 3>& skips,
                                       const std::optional<ag::Var<T>>& global) const;

  std::array<std::optional<DaBlock<T>>, 3> da;
  std::array<std::optional<Conv2d<T>>, 3> global_proj;

 private:
  ModelConfig cfg_;
};

// Upsample x2, concatenate the skip, two conv blocks.
template <typename T>
class UpBlock {
 public:
  UpBlock() = default;
  UpBlock(const Scope<T>& scope, int64_t in_channels, int64_t skip_channels, int64_t out_channels,
          int stat_sets = 1);

  ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& skip, const char* stage) const;

  ConvBnRelu<T> fuse, refine;
};

template <typename T>
struct DecoderOutput {
  ag::Var<T> logits;     // (B, classes, S, S)
  ag::Var<T> post_up3;   // stride-2 feature after the third up block
};

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const Scope<T>& scope, const ModelConfig& cfg);

  DecoderOutput<T> operator()(const ag::Var<T>& tokens, const std::array<ag::Var<T>, 3>& skips) const;

  ConvBnRelu<T> bridge;  // hidden -> 4w on the token grid
  std::array<UpBlock<T>, 3> ups;
  Conv2d<T> head;

 private:
  ModelConfig cfg_;
};

template <typename T>
struct ForwardTrace {
  EncoderOutput<T> encoder;
  std::array<ag::Var<T>, 3> refined_skips;   // DA-refined, before injection
  std::optional<ag::Var<T>> first_pass_post_up3;
  std::optional<ag::Var<T>> global_feature;
  std::array<ag::Var<T>, 3> final_skips;     // what the final decoder pass consumed
  ag::Var<T> logits;
};

// The whole segmentation network. With a GL placement, the decoder runs
// twice: the first pass produces the stride-2 feature that the residue block
// purifies, the second consumes the skips with that feature injected. The two
// passes share decoder weights but keep separate batch-norm statistics
// (slot 1 for the first pass).
template <typename T>
class MipcNet {
 public:
  MipcNet(const ModelConfig& cfg, uint64_t seed);
  MipcNet(const MipcNet&) = delete;
  MipcNet& operator=(const MipcNet&) = delete;

  ag::Var<T> operator()(const ag::Var<T>& image) const;
  ForwardTrace<T> trace(const ag::Var<T>& image) const;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return *store_; }
  const ParamStore<T>& params() const { return *store_; }
  int64_t parameter_count() const { return store_->parameter_count(); }
  void set_training(bool on) { store_->set_training(on); }

  Encoder<T> encoder;
  SkipPipeline<T> skips;
  Decoder<T> decoder;
  std::optional<FeatureBlock<T>> residue;  // present iff gl_placement != none

 private:
  void check_image(const ag::Var<T>& image) const;

  ModelConfig cfg_;
  std::unique_ptr<ParamStore<T>> store_;
};

// Per-pixel argmax over the class axis: (B, K, H, W) -> (B, H, W).
template <typename T>
Tensor<int32_t> argmax_labels(const Tensor<T>& logits);

}  // namespace mipcnet
