// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "mipcnet/attention.hpp"
#include "mipcnet/errors.hpp"
#include "mipcnet/loss.hpp"
#include "mipcnet/network.hpp"
#include "mipcnet/ops.hpp"

namespace mipcnet::gradcheck {

using ag::Var;

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale) {
  Tensor<double> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

Var<double> weighted_sum(const Var<double>& y, uint64_t seed) {
  Rng rng(seed);
  const Var<double> r(random_tensor(y.shape(), rng));
  return ag::sum(ag::mul(y, r));
}

void randomize_constants(ParamStore<double>& store, Rng& rng) {
  for (const auto& entry : store.params()) {
    auto var = entry.second;
    Tensor<double>& v = var.mutable_value();
    bool constant = true;
    for (int64_t i = 1; i < v.numel() && constant; ++i) constant = v[i] == v[0];
    if (!constant) continue;
    const bool scale_like = v.numel() > 0 && v[0] == 1.0;
    for (int64_t i = 0; i < v.numel(); ++i) v[i] = scale_like ? rng.uniform(0.5, 1.5) : rng.uniform(-0.5, 0.5);
  }
}

Result check(const std::string& name, const std::function<Var<double>()>& loss, const Inputs& inputs,
             int64_t max_per_tensor, uint64_t seed, double step) {
  const auto start = std::chrono::steady_clock::now();
  for (const auto& [n, v] : inputs) {
    if (!v.requires_grad()) throw ValidationError("gradcheck input '" + n + "' does not require grad");
    auto handle = v;
    handle.zero_grad();
  }
  const Var<double> root = loss();
  if (root.value().numel() != 1) throw ValidationError("gradcheck: loss must be a scalar");
  ag::backward(root);
  std::vector<Tensor<double>> analytic;
  for (const auto& [n, v] : inputs) {
    analytic.push_back(v.grad().empty() ? Tensor<double>(v.shape()) : v.grad());
  }

  Result r;
  r.name = name;
  Rng rng(seed);
  ag::NoGradGuard guard;
  for (size_t t = 0; t < inputs.size(); ++t) {
    auto var = inputs[t].second;
    Tensor<double>& value = var.mutable_value();
    std::vector<int64_t> idx(static_cast<size_t>(value.numel()));
    for (int64_t i = 0; i < value.numel(); ++i) idx[static_cast<size_t>(i)] = i;
    if (max_per_tensor > 0 && value.numel() > max_per_tensor) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(static_cast<size_t>(max_per_tensor));
    }
    for (int64_t i : idx) {
      const double saved = value[i];
      value[i] = saved + step;
      const double up = loss().value()[0];
      value[i] = saved - step;
      const double down = loss().value()[0];
      value[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double err = relative_error(analytic[t][i], numeric);
      ++r.checked;
      if (r.worst.empty() || err > r.max_rel_err) {
        r.max_rel_err = err;
        r.worst = inputs[t].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

namespace {

Inputs with_params(const std::string& input_name, const Var<double>& x, const ParamStore<double>& store) {
  Inputs in{{input_name, x}};
  for (const auto& [n, v] : store.params()) in.emplace_back(n, v);
  return in;
}

template <typename Block>
Result block_check(const std::string& name, const Shape& shape, uint64_t seed,
                   const std::function<Block(const Scope<double>&)>& make) {
  ParamStore<double> store;
  Rng rng(seed);
  const Block block = make(Scope<double>{&store, &rng, name});
  randomize_constants(store, rng);
  const Var<double> x(random_tensor(shape, rng), true);
  return check(
      name, [&] { return weighted_sum(block(x), seed + 1); }, with_params("x", x, store), 0, seed);
}

}  // namespace

std::vector<Result> run_suite(uint64_t seed, bool include_model, const std::function<void(const Result&)>& on_result) {
  std::vector<Result> results;
  auto emit = [&](Result r) {
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  };
  const Shape block_shape{1, 4, 6, 6};
  using S = Scope<double>;

  emit(block_check<PositionAttention<double>>("pam", block_shape, seed,
                                              [](const S& s) { return PositionAttention<double>(s, 4); }));
  emit(block_check<ChannelAttention<double>>("cam", block_shape, seed,
                                             [](const S& s) { return ChannelAttention<double>(s); }));
  emit(block_check<ChannelGate<double>>("channel_gate", block_shape, seed,
                                        [](const S& s) { return ChannelGate<double>(s, 4); }));
  emit(block_check<PositionGate<double>>("position_gate", block_shape, seed,
                                         [](const S& s) { return PositionGate<double>(s); }));
  emit(block_check<ResidualTail<double>>("residual_tail", block_shape, seed,
                                         [](const S& s) { return ResidualTail<double>(s, 4); }));
  emit(block_check<ConvProductBranch<double>>("conv_product", block_shape, seed,
                                              [](const S& s) { return ConvProductBranch<double>(s, 4); }));
  for (const auto& variant : MipcVariant::all()) {
    emit(block_check<MipcBlock<double>>("mipc[" + variant.key() + "]", block_shape, seed,
                                        [variant](const S& s) { return MipcBlock<double>(s, 4, variant); }));
  }
  emit(block_check<PcBlock<double>>("pc", block_shape, seed, [](const S& s) { return PcBlock<double>(s, 4); }));
  emit(block_check<DaBlock<double>>("da", {1, 4, 5, 5}, seed, [](const S& s) { return DaBlock<double>(s, 4); }));

  {
    Rng rng(seed + 7);
    Tensor<double> logits = random_tensor({2, 3, 5, 5}, rng);
    const Var<double> z(logits);
    Tensor<int32_t> labels({2, 5, 5});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<int32_t>(rng.below(3));
    const Var<double> probs(ag::softmax(z, 1).value(), true);
    const Tensor<double> onehot = loss::one_hot<double>(labels, 3);
    emit(check("soft_dice_loss", [&] { return loss::soft_dice_loss(probs, onehot); }, {{"probs", probs}}, 0, seed));
    const Var<double> x(logits, true);
    emit(check("combined_loss", [&] { return loss::combined_loss(x, labels).total; }, {{"logits", x}}, 0, seed));
  }

  if (include_model) {
    const ModelConfig cfg = ModelConfig::micro();
    MipcNet<double> net(cfg, seed);
    Rng rng(seed + 11);
    randomize_constants(net.params(), rng);
    net.set_training(true);
    const Var<double> image(random_tensor({2, cfg.in_channels, cfg.input_size, cfg.input_size}, rng), true);
    Tensor<int32_t> labels({2, cfg.input_size, cfg.input_size});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<int32_t>(rng.below(cfg.num_classes));
    emit(check(
        "micro_model", [&] { return loss::combined_loss(net(image), labels).total; },
        with_params("image", image, net.params()), 8, seed));
  }
  return results;
}

}  // namespace mipcnet::gradcheck
