// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mipcnet/errors.hpp"
#include "mipcnet/ops.hpp"

namespace mipcnet::loss {

using ag::Node;
using ag::Var;

namespace {

void check_labels(const Shape& logits, const Tensor<int32_t>& labels) {
  if (logits.size() != 4) throw ValidationError("loss: logits must be (B, K, H, W), got " + shape_str(logits));
  const Shape want{logits[0], logits[2], logits[3]};
  if (labels.shape() != want) {
    throw ValidationError("loss: labels " + shape_str(labels.shape()) + " do not match logits " + shape_str(logits));
  }
  for (int64_t i = 0; i < labels.numel(); ++i) {
    if (labels[i] < 0 || labels[i] >= logits[1]) {
      throw ValidationError("loss: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(logits[1]) +
                            ")");
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> one_hot(const Tensor<int32_t>& labels, int64_t num_classes) {
  if (labels.rank() != 3) throw ValidationError("one_hot: labels must be (B, H, W), got " + shape_str(labels.shape()));
  const int64_t b = labels.dim(0), hw = labels.dim(1) * labels.dim(2);
  Tensor<T> out({b, num_classes, labels.dim(1), labels.dim(2)});
  for (int64_t n = 0; n < b; ++n) {
    for (int64_t i = 0; i < hw; ++i) {
      const int32_t k = labels[n * hw + i];
      if (k < 0 || k >= num_classes) throw ValidationError("one_hot: label " + std::to_string(k) + " out of range");
      out[(n * num_classes + k) * hw + i] = T(1);
    }
  }
  return out;
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const Tensor<int32_t>& labels) {
  check_labels(logits.shape(), labels);
  const int64_t b = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const int64_t n = b * hw;
  const T* x = logits.value().data();
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(b * k * hw));
  double total = 0;
  std::vector<double> ex(static_cast<size_t>(k));
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t i = 0; i < hw; ++i) {
      const int64_t base = bi * k * hw + i;
      double m = x[base];
      for (int64_t c = 1; c < k; ++c) m = std::max(m, static_cast<double>(x[base + c * hw]));
      double s = 0;
      for (int64_t c = 0; c < k; ++c) s += ex[static_cast<size_t>(c)] = std::exp(static_cast<double>(x[base + c * hw]) - m);
      for (int64_t c = 0; c < k; ++c) (*probs)[static_cast<size_t>(base + c * hw)] = static_cast<T>(ex[static_cast<size_t>(c)] / s);
      const int32_t label = labels[bi * hw + i];
      total += m + std::log(s) - static_cast<double>(x[base + label * hw]);
    }
  }
  Tensor<T> out({1}, static_cast<T>(total / static_cast<double>(n)));
  return ag::make_result<T>(std::move(out), {logits.node()}, [probs, labels, b, k, hw, n](Node<T>& self) {
    auto& nx = *self.parents[0];
    if (!nx.requires_grad) return;
    const T up = self.grad[0] / static_cast<T>(n);
    Tensor<T> g(nx.value.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = (*probs)[static_cast<size_t>(i)] * up;
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t i = 0; i < hw; ++i) g[(bi * k + labels[bi * hw + i]) * hw + i] -= up;
    }
    nx.accumulate(std::move(g));
  });
}

template <typename T>
Var<T> soft_dice_loss(const Var<T>& probs, const Tensor<T>& onehot, int64_t first_class, double eps) {
  if (probs.shape().size() != 4) throw ValidationError("soft_dice_loss: probs must be (B, K, H, W)");
  if (probs.shape() != onehot.shape()) {
    throw ValidationError("soft_dice_loss: probs " + shape_str(probs.shape()) + " vs one-hot " +
                          shape_str(onehot.shape()));
  }
  const int64_t b = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  if (first_class < 0 || first_class >= k) throw ValidationError("soft_dice_loss: no classes to score");
  const int64_t nc = k - first_class;
  const T* p = probs.value().data();
  const T* g = onehot.data();
  // Per class: 2I + eps and P + G + eps.
  auto num = std::make_shared<std::vector<double>>(static_cast<size_t>(k));
  auto den = std::make_shared<std::vector<double>>(static_cast<size_t>(k));
  double acc = 0;
  for (int64_t c = first_class; c < k; ++c) {
    double inter = 0, sp = 0, sg = 0;
    for (int64_t bi = 0; bi < b; ++bi) {
      const int64_t base = (bi * k + c) * hw;
      for (int64_t i = 0; i < hw; ++i) {
        inter += static_cast<double>(p[base + i]) * static_cast<double>(g[base + i]);
        sp += p[base + i];
        sg += g[base + i];
      }
    }
    (*num)[static_cast<size_t>(c)] = 2 * inter + eps;
    (*den)[static_cast<size_t>(c)] = sp + sg + eps;
    acc += (*num)[static_cast<size_t>(c)] / (*den)[static_cast<size_t>(c)];
  }
  Tensor<T> out({1}, static_cast<T>(1.0 - acc / static_cast<double>(nc)));
  return ag::make_result<T>(std::move(out), {probs.node()},
                            [num, den, onehot, b, k, hw, nc, first_class](Node<T>& self) {
    auto& np = *self.parents[0];
    if (!np.requires_grad) return;
    const double up = static_cast<double>(self.grad[0]) / static_cast<double>(nc);
    Tensor<T> grad(np.value.shape());
    for (int64_t c = first_class; c < k; ++c) {
      const double n = (*num)[static_cast<size_t>(c)], d = (*den)[static_cast<size_t>(c)];
      for (int64_t bi = 0; bi < b; ++bi) {
        const int64_t base = (bi * k + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double gi = onehot[base + i];
          grad[base + i] = static_cast<T>(-up * (2 * gi * d - n) / (d * d));
        }
      }
    }
    np.accumulate(std::move(grad));
  });
}

template <typename T>
LossParts<T> combined_loss(const Var<T>& logits, const Tensor<int32_t>& labels) {
  check_labels(logits.shape(), labels);
  LossParts<T> parts;
  const Var<T> ce = cross_entropy(logits, labels);
  const Var<T> dice = soft_dice_loss(ag::softmax(logits, 1), one_hot<T>(labels, logits.dim(1)));
  parts.ce = ce.value()[0];
  parts.dice = dice.value()[0];
  parts.total = ag::add(ag::scale(ce, T(0.5)), ag::scale(dice, T(0.5)));
  return parts;
}

#define MIPCNET_INSTANTIATE_LOSS(T)                                                                 \
  template Tensor<T> one_hot<T>(const Tensor<int32_t>&, int64_t);                                   \
  template Var<T> cross_entropy(const Var<T>&, const Tensor<int32_t>&);                             \
  template Var<T> soft_dice_loss(const Var<T>&, const Tensor<T>&, int64_t, double);                 \
  template LossParts<T> combined_loss(const Var<T>&, const Tensor<int32_t>&);

MIPCNET_INSTANTIATE_LOSS(float)
MIPCNET_INSTANTIATE_LOSS(double)

}  // namespace mipcnet::loss
