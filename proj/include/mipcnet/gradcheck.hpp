// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mipcnet/autograd.hpp"
#include "mipcnet/layers.hpp"
#include "mipcnet/rng.hpp"

namespace mipcnet::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
// Denominator floor of the relative error, so entries whose true gradient is
// ~0 are judged on absolute error.
inline constexpr double kFloor = 1e-3;

struct Result {
  std::string name;
  double max_rel_err = 0;
  int64_t checked = 0;
  std::string worst;  // "<tensor>[<flat index>]"
  double seconds = 0;
  bool passed(double tol = kTolerance) const { return max_rel_err <= tol; }
};

double relative_error(double analytic, double numeric, double floor = kFloor);

using Inputs = std::vector<std::pair<std::string, ag::Var<double>>>;

// Compares d loss / d input from backward() against central differences for
// every entry of every input (or `max_per_tensor` seeded picks when > 0).
// `loss` must rebuild its graph on each call and return a 1-element Var.
Result check(const std::string& name, const std::function<ag::Var<double>()>& loss, const Inputs& inputs,
             int64_t max_per_tensor = 0, uint64_t seed = 0, double step = kStep);

// sum(r * y) with a fixed random r of y's shape, so batch-norm outputs give a
// non-degenerate scalar.
ag::Var<double> weighted_sum(const ag::Var<double>& y, uint64_t seed);

// Moves every constant-initialised parameter (biases, BN/LN affine, attention
// gammas) off its init value so every path carries gradient.
void randomize_constants(ParamStore<double>& store, Rng& rng);

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0);

// Attention blocks on (1, 4, 6, 6) (DA on (1, 4, 5, 5)), the micro network,
// soft Dice and the combined loss.
std::vector<Result> run_suite(uint64_t seed = 0, bool include_model = true,
                              const std::function<void(const Result&)>& on_result = {});

}  // namespace mipcnet::gradcheck
