// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include <algorithm>
#include <cmath>
#include <limits>

#include "mipcnet/attention.hpp"
#include "mipcnet/errors.hpp"
#include "mipcnet/gradcheck.hpp"
#include "mipcnet/ops.hpp"
#include "test_util.hpp"

using namespace mipcnet;
using ag::Var;
using testutil::max_abs_diff;
using testutil::randn;

namespace {

struct Fixture {
  ParamStore<double> store;
  Rng rng{42};
  Scope<double> scope(const std::string& name = "blk") { return {&store, &rng, name}; }
};

void set_gamma(Var<double> g, double v) { g.mutable_value()[0] = v; }

// Dirac kernel: a 3x3 (or 1x1) conv that copies its input.
void make_identity(Conv2d<double>& conv) {
  auto w = conv.weight;
  Tensor<double>& t = w.mutable_value();
  t.fill(0);
  const int64_t out = t.dim(0), in = t.dim(1), k = t.dim(2);
  for (int64_t o = 0; o < std::min(out, in); ++o) t[((o * in + o) * k + k / 2) * k + k / 2] = 1.0;
  if (conv.bias.defined()) {
    auto b = conv.bias;
    b.mutable_value().fill(0);
  }
}

void zero(Conv2d<double>& conv) {
  auto w = conv.weight;
  w.mutable_value().fill(0);
  if (conv.bias.defined()) {
    auto b = conv.bias;
    b.mutable_value().fill(0);
  }
}

Tensor<double> spatial_permute(const Tensor<double>& x, uint64_t seed) {
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  std::vector<int64_t> perm(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());
  Tensor<double> y(x.shape());
  for (int64_t p = 0; p < b * c; ++p) {
    for (int64_t i = 0; i < n; ++i) y[p * n + i] = x[p * n + perm[static_cast<size_t>(i)]];
  }
  return y;
}

Tensor<double> channel_permute(const Tensor<double>& x, uint64_t seed) {
  const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  std::vector<int64_t> perm(static_cast<size_t>(c));
  for (int64_t i = 0; i < c; ++i) perm[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());
  Tensor<double> y(x.shape());
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t ci = 0; ci < c; ++ci) {
      for (int64_t i = 0; i < n; ++i) y[(bi * c + ci) * n + i] = x[(bi * c + perm[static_cast<size_t>(ci)]) * n + i];
    }
  }
  return y;
}

}  // namespace

TEST(PositionAttention, PreservesShape) {
  Fixture f;
  PositionAttention<double> pam(f.scope(), 8);
  set_gamma(pam.gamma, 0.7);
  const Var<double> x(randn({2, 8, 14, 14}, 1));
  EXPECT_EQ(pam(x).shape(), (Shape{2, 8, 14, 14}));
}

TEST(PositionAttention, ZeroGammaIsExactIdentity) {
  Fixture f;
  PositionAttention<double> pam(f.scope(), 8);
  const Var<double> x(randn({2, 8, 7, 5}, 2));
  EXPECT_TRUE(pam(x).value() == x.value());
}

TEST(PositionAttention, SinglePositionAddsScaledValueProjection) {
  Fixture f;
  PositionAttention<double> pam(f.scope(), 8);
  set_gamma(pam.gamma, 0.5);
  const Var<double> x(randn({2, 8, 1, 1}, 3));
  const Tensor<double> v = pam.value(x).value();
  const Tensor<double> y = pam(x).value();
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], x.value()[i] + 0.5 * v[i], 1e-12);
  const Tensor<double> a = pam.affinity(x).value();
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], 1.0);
}

TEST(PositionAttention, AffinityRowsSumToOne) {
  Fixture f;
  PositionAttention<double> pam(f.scope(), 16);
  const Tensor<double> a = pam.affinity(Var<double>(randn({2, 16, 6, 7}, 4, 3.0))).value();
  const int64_t n = a.dim(2);
  for (int64_t r = 0; r < a.dim(0) * a.dim(1); ++r) {
    double s = 0;
    for (int64_t j = 0; j < n; ++j) s += a[r * n + j];
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(PositionAttention, RejectsNonFiniteInput) {
  Fixture f;
  PositionAttention<double> pam(f.scope(), 4);
  Tensor<double> x = randn({1, 4, 3, 3}, 5);
  x[7] = std::numeric_limits<double>::quiet_NaN();
  try {
    pam(Var<double>(x));
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("pam_forward"), std::string::npos) << e.what();
  }
}

TEST(ChannelAttention, PreservesShapeAndZeroGammaIsIdentity) {
  Fixture f;
  ChannelAttention<double> cam(f.scope());
  const Var<double> x(randn({1, 4, 8, 8}, 6));
  EXPECT_TRUE(cam(x).value() == x.value());
  set_gamma(cam.gamma, -0.3);
  EXPECT_EQ(cam(x).shape(), (Shape{1, 4, 8, 8}));
}

TEST(ChannelAttention, SingleChannelScalesByOnePlusGamma) {
  Fixture f;
  ChannelAttention<double> cam(f.scope());
  set_gamma(cam.gamma, 0.3);
  const Var<double> x(randn({2, 1, 5, 4}, 7));
  const Tensor<double> y = cam(x).value();
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], x.value()[i] * 1.3, 1e-12);
}

TEST(ChannelAttention, AffinityRowsSumToOne) {
  Fixture f;
  ChannelAttention<double> cam(f.scope());
  const Tensor<double> a = cam.affinity(Var<double>(randn({2, 6, 5, 5}, 8))).value();
  for (int64_t r = 0; r < 2 * 6; ++r) {
    double s = 0;
    for (int64_t j = 0; j < 6; ++j) s += a[r * 6 + j];
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(ChannelGate, PoolsConstantChannelsExactly) {
  const double values[] = {0.3, -1.7, 2.5e-3, 11.0};
  Tensor<double> x({1, 4, 14, 14});
  for (int64_t c = 0; c < 4; ++c) {
    for (int64_t i = 0; i < 196; ++i) x[c * 196 + i] = values[c];
  }
  const Tensor<double> pooled = ag::mean_axis(ag::mean_axis(Var<double>(x), 3), 2).value();
  for (int64_t c = 0; c < 4; ++c) EXPECT_EQ(pooled[c], values[c]);
}

TEST(ChannelGate, RangeAndSpatialPermutationInvariance) {
  Fixture f;
  ChannelGate<double> gate(f.scope(), 32);
  const Tensor<double> x = randn({2, 32, 6, 6}, 9, 4.0);
  const Tensor<double> g = gate(Var<double>(x)).value();
  EXPECT_EQ(g.shape(), (Shape{2, 32, 1, 1}));
  for (double v : g.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_LE(max_abs_diff(g, gate(Var<double>(spatial_permute(x, 10))).value()), 1e-14);
}

TEST(PositionGate, ShapeRangeAndChannelPermutationInvariance) {
  Fixture f;
  PositionGate<double> gate(f.scope());
  const Tensor<double> x = randn({2, 16, 8, 8}, 11, 3.0);
  const Tensor<double> g = gate(Var<double>(x)).value();
  EXPECT_EQ(g.shape(), (Shape{2, 1, 8, 8}));
  for (double v : g.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_LE(max_abs_diff(g, gate(Var<double>(channel_permute(x, 12))).value()), 1e-14);
}

TEST(MipcBlock, EveryVariantPreservesShape) {
  for (const auto& variant : MipcVariant::all()) {
    ParamStore<float> store;
    Rng rng(1);
    MipcBlock<float> block(Scope<float>{&store, &rng, "mipc"}, 32, variant);
    const Var<float> x(randn<float>({2, 32, 28, 28}, 13));
    EXPECT_EQ(block(x).shape(), (Shape{2, 32, 28, 28})) << variant.name();
  }
}

TEST(MipcBlock, VariantsAreTheFourCombinations) {
  const auto all = MipcVariant::all();
  EXPECT_EQ(all[0], MipcVariant{});
  for (size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(MipcVariant::parse(all[i].key()), all[i]);
    for (size_t j = i + 1; j < all.size(); ++j) EXPECT_FALSE(all[i] == all[j]);
  }
  EXPECT_THROW(MipcVariant::parse("pam-pam"), ValidationError);
}

TEST(MipcBlock, GatedBranchIsBoundedByUngated) {
  Fixture f;
  MipcBlock<double> block(f.scope(), 8);
  set_gamma(block.pam.gamma, 0.8);
  set_gamma(block.cam.gamma, 0.4);
  const Var<double> x(randn({2, 8, 6, 6}, 14));
  const Tensor<double> beta = block.position_part(x).value();
  const Tensor<double> pam = block.pam(x).value();
  const Tensor<double> alpha = block.channel_part(x).value();
  const Tensor<double> cam = block.cam(x).value();
  for (int64_t i = 0; i < beta.numel(); ++i) {
    EXPECT_LE(std::abs(beta[i]), std::abs(pam[i]));
    EXPECT_LE(std::abs(alpha[i]), std::abs(cam[i]));
  }
}

TEST(MipcBlock, MismatchedPartsAreRejected) {
  const Var<double> a(Tensor<double>({1, 2, 3, 3})), b(Tensor<double>({1, 2, 3, 3})), c(Tensor<double>({1, 3, 3, 3}));
  EXPECT_THROW(sum_parts(a, b, c), ValidationError);
}

TEST(MipcBlock, DeterministicForSeed) {
  auto run = [] {
    ParamStore<float> store;
    Rng rng(5);
    MipcBlock<float> block(Scope<float>{&store, &rng, "mipc"}, 16);
    return block(Var<float>(randn<float>({2, 16, 9, 9}, 15))).value();
  };
  EXPECT_TRUE(run() == run());
}

TEST(ResidualTail, ZeroKernelsGiveRelu) {
  for (bool training : {true, false}) {
    Fixture f;
    f.store.set_training(training);
    ResidualTail<double> tail(f.scope(), 8);
    zero(tail.conv_a);
    zero(tail.conv_b);
    const Var<double> x(randn({1, 8, 16, 16}, 16));
    const Tensor<double> y = tail(x).value();
    ASSERT_EQ(y.shape(), x.shape());
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], std::max(0.0, x.value()[i]));
  }
}

TEST(DaBlock, IdentityConvsAndZeroGammaDoubleTheInput) {
  Fixture f;
  DaBlock<double> da(f.scope(), 6);
  for (auto* conv : {&da.pam_in, &da.pam_out, &da.cam_in, &da.cam_out}) make_identity(*conv);
  const Var<double> x(randn({2, 6, 7, 7}, 17));
  const Tensor<double> y = da(x).value();
  ASSERT_EQ(y.shape(), x.shape());
  for (int64_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], 2.0 * x.value()[i]);
}

TEST(DaBlock, PreservesShape) {
  ParamStore<float> store;
  Rng rng(3);
  DaBlock<float> da(Scope<float>{&store, &rng, "da"}, 64);
  EXPECT_EQ(da(Var<float>(randn<float>({2, 64, 28, 28}, 18))).shape(), (Shape{2, 64, 28, 28}));
}

TEST(PcBlock, MatchesMipcWithGatesForcedToOne) {
  Fixture f;
  MipcBlock<double> mipc(f.scope("mipc"), 8);
  set_gamma(mipc.pam.gamma, 0.6);
  set_gamma(mipc.cam.gamma, -0.2);
  ParamStore<double> pc_store;
  PcBlock<double> pc(Scope<double>{&pc_store, &f.rng, "pc"}, 8);
  pc.pam = mipc.pam;
  pc.cam = mipc.cam;
  pc.conv_branch = mipc.conv_branch;
  pc.tail = mipc.tail;
  const Var<double> x(randn({2, 8, 14, 14}, 19));
  const Tensor<double> forced = mipc(x, GateMode::kForcedOne).value();
  EXPECT_LE(max_abs_diff(forced, pc(x).value()), 1e-6);
  EXPECT_EQ(pc(x).shape(), (Shape{2, 8, 14, 14}));
}

TEST(PcBlock, HasFewerParametersThanMipc) {
  for (int64_t c : {4, 16, 64}) {
    ParamStore<float> a, b;
    Rng rng(0);
    MipcBlock<float>(Scope<float>{&a, &rng, "m"}, c);
    PcBlock<float>(Scope<float>{&b, &rng, "p"}, c);
    EXPECT_LT(b.parameter_count(), a.parameter_count()) << "C=" << c;
  }
}

TEST(GradCheck, EveryBlockAndLossPasses) {
  for (const auto& r : gradcheck::run_suite(0, /*include_model=*/false)) {
    EXPECT_LE(r.max_rel_err, gradcheck::kTolerance) << r.name << " worst at " << r.worst;
    EXPECT_GT(r.checked, 0) << r.name;
  }
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A loss whose backward is deliberately inconsistent with its forward.
  const Var<double> x(randn({3}, 20), true);
  auto loss = [&] {
    Tensor<double> v({1}, 0.0);
    for (int64_t i = 0; i < 3; ++i) v[0] += x.value()[i] * x.value()[i];
    return ag::make_result<double>(std::move(v), {x.node()}, [](ag::Node<double>& self) {
      auto& p = *self.parents[0];
      Tensor<double> g(p.value.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = 3.0 * p.value[i] * self.grad[0];
      p.accumulate(std::move(g));
    });
  };
  EXPECT_GT(gradcheck::check("wrong", loss, {{"x", x}}).max_rel_err, 0.1);
}
