// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/errors.hpp"
#include "mipcnet/network.hpp"
#include "mipcnet/ops.hpp"
#include "test_util.hpp"

using namespace mipcnet;
using ag::Var;
using testutil::randn;

namespace {

Var<float> image_for(const ModelConfig& cfg, int64_t batch, uint64_t seed) {
  return Var<float>(randn<float>({batch, cfg.in_channels, cfg.input_size, cfg.input_size}, seed));
}

bool differs(const Tensor<float>& a, const Tensor<float>& b) { return !(a == b); }

}  // namespace

TEST(ModelConfig, PresetArithmetic) {
  const auto paper = ModelConfig::paper();
  EXPECT_EQ(paper.input_size, 224);
  EXPECT_EQ(paper.num_classes, 9);
  EXPECT_EQ(paper.num_tokens(), 196);
  EXPECT_EQ(paper.transformer.hidden_dim, 768);
  EXPECT_EQ(paper.transformer.depth, 12);
  EXPECT_EQ(paper.transformer.heads, 12);
  const auto tiny = ModelConfig::tiny();
  EXPECT_EQ(tiny.input_size, 64);
  EXPECT_EQ(tiny.num_tokens(), 16);
  ModelConfig w32 = tiny;
  w32.stem_base_width = 32;
  EXPECT_EQ(w32.skip_width(1), 32);
  EXPECT_EQ(w32.skip_width(2), 64);
  EXPECT_EQ(w32.skip_width(3), 128);
}

TEST(ModelConfig, RejectsBadValuesByName) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_size = 72;
  try {
    cfg.validate();
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("input_size"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ModelConfig::from_json({{"no_such_key", 1}}), ValidationError);
  EXPECT_THROW(ModelConfig::from_preset("huge"), ValidationError);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.gl_placement = GlPlacement::kAll;
  cfg.mipc_variant = MipcVariant::all()[3];
  cfg.block = BlockKind::kPc;
  EXPECT_EQ(ModelConfig::from_json(cfg.to_json()), cfg);
}

TEST(Network, TinyShapes) {
  const auto cfg = ModelConfig::tiny();
  MipcNet<float> net(cfg, 0);
  const auto t = net.trace(image_for(cfg, 2, 1));
  EXPECT_EQ(t.encoder.tokens.shape(), (Shape{2, 16, 64}));
  const int64_t w = cfg.stem_base_width;
  EXPECT_EQ(t.encoder.skips[0].shape(), (Shape{2, w, 32, 32}));
  EXPECT_EQ(t.encoder.skips[1].shape(), (Shape{2, 2 * w, 16, 16}));
  EXPECT_EQ(t.encoder.skips[2].shape(), (Shape{2, 4 * w, 8, 8}));
  EXPECT_EQ(t.logits.shape(), (Shape{2, 4, 64, 64}));
}

TEST(Network, StemStagesHalveAndDouble) {
  const auto cfg = ModelConfig::tiny();
  MipcNet<float> net(cfg, 0);
  Var<float> x = image_for(cfg, 1, 2);
  int64_t c = cfg.in_channels, s = cfg.input_size;
  for (int stage = 0; stage < 3; ++stage) {
    const Var<float> y = net.encoder.stem[static_cast<size_t>(stage)](x);
    EXPECT_EQ(y.dim(2), s / 2) << "stage " << stage + 1;
    EXPECT_EQ(y.dim(3), s / 2) << "stage " << stage + 1;
    EXPECT_EQ(y.dim(1), stage == 0 ? cfg.stem_base_width : 2 * c) << "stage " << stage + 1;
    c = y.dim(1);
    s = y.dim(2);
    x = y;
  }
}

TEST(Network, ArgmaxLabelsAreInRange) {
  const auto cfg = ModelConfig::tiny();
  MipcNet<float> net(cfg, 3);
  const Tensor<int32_t> labels = argmax_labels(net(image_for(cfg, 2, 3)).value());
  EXPECT_EQ(labels.shape(), (Shape{2, 64, 64}));
  for (int32_t v : labels.values()) {
    EXPECT_GE(v, 0);
    EXPECT_LT(v, cfg.num_classes);
  }
}

TEST(Network, RejectsWrongImageShape) {
  const auto cfg = ModelConfig::tiny();
  MipcNet<float> net(cfg, 0);
  EXPECT_THROW(net(Var<float>(Tensor<float>({1, 3, 64, 64}))), ValidationError);
  EXPECT_THROW(net(Var<float>(Tensor<float>({1, 1, 32, 32}))), ValidationError);
}

TEST(Network, DeterministicForSeed) {
  const auto cfg = ModelConfig::tiny();
  MipcNet<float> a(cfg, 9), b(cfg, 9), c(cfg, 10);
  const auto x = image_for(cfg, 2, 4);
  EXPECT_TRUE(a(x).value() == b(x).value());
  EXPECT_TRUE(differs(a(x).value(), c(x).value()));
}

TEST(SkipPipeline, DisabledPipelineIsIdentity) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.use_da_skips = false;
  cfg.gl_placement = GlPlacement::kNone;
  MipcNet<float> net(cfg, 0);
  const auto t = net.trace(image_for(cfg, 1, 5));
  for (size_t k = 0; k < 3; ++k) EXPECT_TRUE(t.final_skips[k].value() == t.encoder.skips[k].value());
}

TEST(SkipPipeline, InjectionIsLocalToTheSelectedLevel) {
  ModelConfig base = ModelConfig::tiny();
  for (auto placement : {GlPlacement::kFirst, GlPlacement::kSecond, GlPlacement::kThird, GlPlacement::kAll}) {
    ModelConfig cfg = base;
    cfg.gl_placement = placement;
    MipcNet<float> net(cfg, 0);
    const auto t = net.trace(image_for(cfg, 1, 6));
    ASSERT_TRUE(t.global_feature.has_value());
    const auto injected = net.skips.inject(t.refined_skips, *t.global_feature);
    for (int level = 1; level <= 3; ++level) {
      const size_t k = static_cast<size_t>(level - 1);
      EXPECT_EQ(injected[k].shape(), t.refined_skips[k].shape());
      EXPECT_EQ(differs(injected[k].value(), t.refined_skips[k].value()), gl_injects_level(placement, level))
          << to_string(placement) << " level " << level;
    }
  }
}

TEST(SkipPipeline, GlobalFeatureRequiredIffPlacement) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.gl_placement = GlPlacement::kFirst;
  MipcNet<float> net(cfg, 0);
  const auto t = net.trace(image_for(cfg, 1, 7));
  EXPECT_THROW(net.skips(t.encoder.skips, std::nullopt), ValidationError);
  ModelConfig none = ModelConfig::tiny();
  none.gl_placement = GlPlacement::kNone;
  MipcNet<float> plain(none, 0);
  EXPECT_THROW(plain.skips(t.encoder.skips, t.global_feature), ValidationError);
}

TEST(Network, GlPlacementChangesOutputAndAddsParameters) {
  ModelConfig none = ModelConfig::tiny();
  none.gl_placement = GlPlacement::kNone;
  ModelConfig first = ModelConfig::tiny();
  first.gl_placement = GlPlacement::kFirst;
  MipcNet<float> a(none, 0), b(first, 0);
  const auto x = image_for(none, 1, 8);
  EXPECT_TRUE(differs(a(x).value(), b(x).value()));
  EXPECT_GT(b.parameter_count(), a.parameter_count());
}

TEST(Network, BaselineWithoutNovelComponentsKeepsShapes) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.use_da_skips = false;
  cfg.gl_placement = GlPlacement::kNone;
  cfg.block = BlockKind::kIdentity;
  MipcNet<float> net(cfg, 0);
  EXPECT_EQ(net(image_for(cfg, 2, 9)).shape(), (Shape{2, 4, 64, 64}));
  EXPECT_LT(net.parameter_count(), MipcNet<float>(ModelConfig::tiny(), 0).parameter_count());
}

TEST(Network, TwoPassRunsTheDecoderTwice) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.gl_placement = GlPlacement::kAll;
  MipcNet<float> net(cfg, 0);
  const auto t = net.trace(image_for(cfg, 1, 10));
  ASSERT_TRUE(t.first_pass_post_up3.has_value());
  EXPECT_EQ(t.first_pass_post_up3->dim(2), cfg.input_size / 2);
  EXPECT_EQ(t.global_feature->shape(), t.first_pass_post_up3->shape());
}

TEST(TransformerLayer, ShapeAndAttentionRows) {
  ParamStore<double> store;
  Rng rng(0);
  TransformerConfig tc;
  tc.hidden_dim = 16;
  tc.heads = 4;
  TransformerLayer<double> layer(Scope<double>{&store, &rng, "t"}, tc);
  const Var<double> tokens(randn({2, 9, 16}, 11));
  EXPECT_EQ(layer(tokens).shape(), (Shape{2, 9, 16}));
  const Tensor<double> w = layer.attention_weights(tokens).value();
  EXPECT_EQ(w.shape(), (Shape{8, 9, 9}));
  for (int64_t r = 0; r < 8 * 9; ++r) {
    double s = 0;
    for (int64_t j = 0; j < 9; ++j) s += w[r * 9 + j];
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(Network, PaperPresetShapes) {
  const auto cfg = ModelConfig::paper();
  MipcNet<float> net(cfg, 0);
  net.set_training(false);
  ag::NoGradGuard guard;
  const auto t = net.trace(image_for(cfg, 1, 12));
  EXPECT_EQ(t.encoder.tokens.shape(), (Shape{1, 196, 768}));
  EXPECT_EQ(t.encoder.skips[0].dim(2), 112);
  EXPECT_EQ(t.encoder.skips[1].dim(2), 56);
  EXPECT_EQ(t.encoder.skips[2].dim(2), 28);
  EXPECT_EQ(t.logits.shape(), (Shape{1, 9, 224, 224}));
}
