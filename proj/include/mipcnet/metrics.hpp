// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mipcnet/tensor.hpp"

namespace mipcnet::metrics {

// (H, W) array of 0/1.
using BinaryMask = Tensor<uint8_t>;
// (H, W) array of class ids.
using LabelMap = Tensor<int32_t>;

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

// Zero denominators resolve to 1.0 and set the matching *_vacuous flag.
struct PixelMetrics {
  double accuracy = 0, precision = 0, specificity = 0;
  bool precision_vacuous = false, specificity_vacuous = false;
};

struct OverlapMetrics {
  double iou = 0, dice = 0;
  bool vacuous = false;  // both masks empty
};

// Physical size of one pixel, (row, column).
struct Spacing {
  double row = 1.0, col = 1.0;
};

struct HausdorffResult {
  enum class Status { kOk, kBothEmpty, kOneEmpty };
  double distance = 0;
  Status status = Status::kOk;
};

BinaryMask binarize(const LabelMap& labels, int32_t cls);

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt);
PixelMetrics pixel_metrics(const ConfusionCounts& c);
OverlapMetrics overlap_metrics(const ConfusionCounts& c);

// Foreground pixels with at least one 8-neighbour that is background or
// outside the image, as (row, col).
std::vector<std::pair<int64_t, int64_t>> boundary_points(const BinaryMask& mask);

// Symmetric Hausdorff distance between the boundary sets. With percentile
// below 100, the percentile of the pooled directed distances is returned
// instead of the maximum. One empty mask yields the image diagonal
// sqrt((H*row)^2 + (W*col)^2); two empty masks yield 0.
HausdorffResult hausdorff(const BinaryMask& a, const BinaryMask& b, Spacing spacing = {}, double percentile = 100.0);

struct ClassMetrics {
  int32_t cls = 0;
  std::string name;
  double dice = 0, iou = 0, hd = 0, accuracy = 0, precision = 0, specificity = 0;
  bool in_gt = false, in_pred = false;
  bool vacuous = false;    // absent from both masks
  bool hd_penalty = false; // one mask empty, diagonal penalty applied
  int64_t cases = 0;       // cases contributing to the class averages
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;  // foreground classes 1..K-1
  double mean_dice = 0, mean_iou = 0, mean_hd = 0;
  double mean_accuracy = 0, mean_precision = 0, mean_specificity = 0;
  int64_t classes_in_mean = 0;
  int64_t case_count = 0;
  Spacing spacing;
  std::string hd_units = "px";

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  // | cases | DSC (%) | HD | <class> DSC ... |
  std::string to_markdown() const;
  bool operator==(const MetricsReport& other) const { return to_json() == other.to_json(); }
};

std::vector<std::string> default_class_names(int64_t num_classes);

// One-vs-rest metrics for every foreground class of one case. Means run over
// the classes present in the ground truth; if there are none, over the
// classes present in either map; if still none, the report is perfect.
MetricsReport per_class_report(const LabelMap& pred, const LabelMap& gt, int64_t num_classes, Spacing spacing = {},
                               const std::vector<std::string>& class_names = {});

// Dataset-level aggregation: each class is averaged over the cases whose
// ground truth contains it, then the per-class averages are averaged.
class ReportAccumulator {
 public:
  ReportAccumulator(int64_t num_classes, Spacing spacing = {}, std::vector<std::string> class_names = {});

  void add_case(const LabelMap& pred, const LabelMap& gt);
  MetricsReport finish() const;

 private:
  int64_t num_classes_;
  Spacing spacing_;
  std::vector<std::string> names_;
  std::vector<MetricsReport> cases_;
};

}  // namespace mipcnet::metrics
