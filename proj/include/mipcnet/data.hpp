// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mipcnet/metrics.hpp"
#include "mipcnet/tensor.hpp"

namespace mipcnet::data {

struct Sample {
  std::string id;
  Tensor<float> image;    // (C, H, W)
  Tensor<int32_t> label;  // (H, W)
  std::optional<metrics::Spacing> spacing;
  bool constant_image = false;  // set by preprocess when min == max

  bool operator==(const Sample& o) const {
    return id == o.id && image == o.image && label == o.label && constant_image == o.constant_image &&
           spacing.has_value() == o.spacing.has_value() &&
           (!spacing || (spacing->row == o.spacing->row && spacing->col == o.spacing->col));
  }
};

struct Dataset {
  std::vector<Sample> samples;
  int64_t num_classes = 0;
  std::vector<std::string> class_names;
  std::vector<std::string> train_ids, test_ids;  // empty when no split is recorded

  bool empty() const { return samples.empty(); }
  size_t size() const { return samples.size(); }
  // Samples whose id is listed, in dataset order.
  Dataset subset(const std::vector<std::string>& ids) const;
  Dataset train_split() const { return train_ids.empty() ? *this : subset(train_ids); }
  Dataset test_split() const { return test_ids.empty() ? *this : subset(test_ids); }
};

// Checks the Sample invariants: matching spatial dims, labels in [0, K),
// finite image values.
void validate_sample(const Sample& s, int64_t num_classes);

struct SyntheticSpec {
  int64_t num_samples = 8;
  int64_t num_classes = 4;
  int64_t image_size = 64;
  int64_t channels = 1;
  int64_t shapes_min = 1;  // ellipses per foreground class
  int64_t shapes_max = 2;
  double noise_sigma = 0.05;
  double train_fraction = 0.8;
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j, SyntheticSpec base);
  static SyntheticSpec from_json(const nlohmann::json& j);
};

// Foreground classes are drawn in class order as ellipses, so later classes
// cover earlier ones. Intensities sit on the 1/255 grid so the PNG
// round-trip is lossless.
Dataset generate_synthetic(const SyntheticSpec& spec);

// Mean intensity assigned to class k before noise.
float class_intensity(int64_t k, int64_t num_classes);

nlohmann::json manifest_json(const Dataset& ds, const std::optional<SyntheticSpec>& spec = std::nullopt);

// Writes <id>_img.png, <id>_mask.png and manifest.json.
void write_folder(const Dataset& ds, const std::filesystem::path& dir,
                  const std::optional<SyntheticSpec>& spec = std::nullopt);

// Reads every <id>_img.png / <id>_mask.png pair in sorted id order. The class
// count comes from `num_classes`, else manifest.json, else the largest label.
Dataset load_folder(const std::filesystem::path& dir, int64_t num_classes = 0);

// 8-bit or 16-bit grayscale/RGB(A) PNG -> (C, H, W) in [0, 1]; alpha dropped.
Tensor<float> read_png_image(const std::filesystem::path& path);
// (H, W) label map stored as 8-bit (or 16-bit when any label > 255) gray.
Tensor<int32_t> read_png_labels(const std::filesystem::path& path);
// (C, H, W) in [0, 1] with C in {1, 3}, quantized to 8 bits.
void write_png_image(const std::filesystem::path& path, const Tensor<float>& image);
void write_png_labels(const std::filesystem::path& path, const Tensor<int32_t>& labels);

// Bilinear image resize, nearest label resize, per-image min-max scaling to
// [0, 1] then (x - 0.5) / 0.5. A constant image becomes all zeros.
Sample preprocess(const Sample& s, int64_t target_size);

Tensor<int32_t> resize_nearest(const Tensor<int32_t>& labels, int64_t out_h, int64_t out_w);

struct AugmentParams {
  bool flip_h = false, flip_v = false;
  int quarter_turns = 0;  // counter-clockwise
};

AugmentParams augment_params(const std::string& id, uint64_t epoch, uint64_t seed, bool square);
// Flips then rotation, applied identically to image and label.
Sample apply_augment(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, uint64_t epoch, uint64_t seed, bool enabled = true);

}  // namespace mipcnet::data
