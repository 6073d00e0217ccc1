// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include <cmath>

#include "mipcnet/errors.hpp"
#include "mipcnet/gradcheck.hpp"
#include "mipcnet/loss.hpp"
#include "mipcnet/ops.hpp"
#include "test_util.hpp"

using namespace mipcnet;
using ag::Var;

namespace {

Tensor<int32_t> random_labels(const Shape& shape, int64_t k, uint64_t seed) {
  Rng rng(seed);
  Tensor<int32_t> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<int32_t>(rng.below(static_cast<uint64_t>(k)));
  return t;
}

// Logits that put `scale` on the ground-truth class and 0 elsewhere.
Tensor<double> peaked(const Tensor<int32_t>& labels, int64_t k, double scale) {
  const int64_t b = labels.dim(0), hw = labels.dim(1) * labels.dim(2);
  Tensor<double> z({b, k, labels.dim(1), labels.dim(2)});
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t i = 0; i < hw; ++i) z[(bi * k + labels[bi * hw + i]) * hw + i] = scale;
  }
  return z;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  for (int64_t k : {2, 3, 4, 9}) {
    const auto labels = random_labels({2, 5, 6}, k, static_cast<uint64_t>(k));
    const auto parts = loss::combined_loss(Var<double>(Tensor<double>({2, k, 5, 6}, 0.37)), labels);
    EXPECT_NEAR(parts.ce, std::log(static_cast<double>(k)), 1e-9) << "K=" << k;
  }
}

TEST(SoftDice, ClosedFormAtUniformProbabilities) {
  // K = 2 on a 2x2 image, foreground at three pixels; background is not scored.
  Tensor<int32_t> labels({1, 2, 2}, std::vector<int32_t>{1, 0, 1, 1});
  const Var<double> probs(Tensor<double>({1, 2, 2, 2}, 0.5));
  const double got = loss::soft_dice_loss(probs, loss::one_hot<double>(labels, 2)).value()[0];
  const double eps = loss::kDiceEps;
  EXPECT_NEAR(got, 1.0 - (2 * 1.5 + eps) / (2.0 + 3.0 + eps), 1e-15);
}

TEST(SoftDice, ExactOneHotIsNearZero) {
  const auto labels = random_labels({2, 6, 6}, 4, 3);
  const auto onehot = loss::one_hot<double>(labels, 4);
  EXPECT_LE(loss::soft_dice_loss(Var<double>(onehot), onehot).value()[0], 1e-5);
}

TEST(SoftDice, RejectsMismatchedShapes) {
  const Var<double> probs(Tensor<double>({1, 3, 2, 2}, 1.0 / 3));
  EXPECT_THROW(loss::soft_dice_loss(probs, Tensor<double>({1, 2, 2, 2})), ValidationError);
}

TEST(CombinedLoss, NonNegativeOnRandomLogits) {
  for (uint64_t s = 0; s < 50; ++s) {
    const auto labels = random_labels({2, 4, 4}, 3, s);
    const auto parts = loss::combined_loss(Var<double>(testutil::randn({2, 3, 4, 4}, s, 5.0)), labels);
    EXPECT_GE(parts.ce, 0.0);
    EXPECT_GE(parts.dice, 0.0);
    EXPECT_GE(parts.total.value()[0], 0.0);
    EXPECT_NEAR(parts.total.value()[0], 0.5 * parts.ce + 0.5 * parts.dice, 1e-12);
  }
}

TEST(CombinedLoss, DecreasesAsLogitsSharpenOnTruth) {
  const auto labels = random_labels({2, 8, 8}, 4, 11);
  double previous = 1e9;
  for (double scale : {1.0, 5.0, 20.0}) {
    const double v = loss::combined_loss(Var<double>(peaked(labels, 4, scale)), labels).total.value()[0];
    EXPECT_LT(v, previous) << "scale " << scale;
    previous = v;
  }
  EXPECT_LT(previous, 1e-6);
}

TEST(CombinedLoss, StableForLargeLogits) {
  const auto labels = random_labels({1, 4, 4}, 3, 12);
  const auto parts = loss::combined_loss(Var<float>(testutil::randn<float>({1, 3, 4, 4}, 12, 500.0)), labels);
  EXPECT_TRUE(std::isfinite(parts.total.value()[0]));
}

TEST(CombinedLoss, RejectsLabelsOutOfRange) {
  Tensor<int32_t> labels({1, 2, 2});
  labels[0] = 3;
  EXPECT_THROW(loss::combined_loss(Var<double>(Tensor<double>({1, 3, 2, 2})), labels), ValidationError);
}

TEST(CombinedLoss, GradientsMatchFiniteDifferences) {
  const auto labels = random_labels({2, 5, 5}, 3, 13);
  const Var<double> z(testutil::randn({2, 3, 5, 5}, 13), true);
  const auto r = gradcheck::check("combined", [&] { return loss::combined_loss(z, labels).total; }, {{"z", z}});
  EXPECT_LE(r.max_rel_err, gradcheck::kTolerance) << r.worst;
  const Var<double> p(ag::softmax(Var<double>(testutil::randn({2, 3, 5, 5}, 14)), 1).value(), true);
  const auto onehot = loss::one_hot<double>(labels, 3);
  const auto d = gradcheck::check("dice", [&] { return loss::soft_dice_loss(p, onehot); }, {{"p", p}});
  EXPECT_LE(d.max_rel_err, gradcheck::kTolerance) << d.worst;
}
