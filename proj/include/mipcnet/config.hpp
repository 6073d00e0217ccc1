// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "mipcnet/attention.hpp"

namespace mipcnet {

// Which skip level(s) receive the purified global decoder feature. Level 1 is
// the stride-2 (shallowest) skip.
enum class GlPlacement { kNone, kFirst, kSecond, kThird, kAll };

// The block placed before the transformer (and used to purify the global
// decoder feature): mutual inclusion, independent position/channel, or none.
enum class BlockKind { kMipc, kPc, kIdentity };

std::string to_string(GlPlacement p);
std::string to_string(BlockKind k);
GlPlacement parse_gl_placement(const std::string& s);
BlockKind parse_block_kind(const std::string& s);
bool gl_injects_level(GlPlacement p, int level);  // level in {1, 2, 3}

struct TransformerConfig {
  int64_t hidden_dim = 64;
  int64_t depth = 2;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;

  bool operator==(const TransformerConfig&) const = default;
};

struct ModelConfig {
  std::string preset = "tiny";
  int64_t input_size = 64;
  int64_t in_channels = 1;
  int64_t num_classes = 4;
  int64_t stem_base_width = 16;
  TransformerConfig transformer;
  int64_t token_stride = 16;
  MipcVariant mipc_variant;
  BlockKind block = BlockKind::kMipc;
  bool use_da_skips = true;
  GlPlacement gl_placement = GlPlacement::kFirst;

  // 224 input, 3 channels, 9 classes, hidden 768 / depth 12 / 12 heads.
  static ModelConfig paper();
  // 64 input, 1 channel, 4 classes, hidden 64 / depth 2 / 4 heads.
  static ModelConfig tiny();
  // Smallest useful configuration, for end-to-end gradient checks.
  static ModelConfig micro();
  static ModelConfig from_preset(const std::string& name);

  int64_t grid_side() const { return input_size / token_stride; }
  int64_t num_tokens() const { return grid_side() * grid_side(); }
  int64_t skip_width(int level) const { return stem_base_width << (level - 1); }

  // Throws ValidationError naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  // Starts from the preset named in j (or `base`) and applies every key;
  // unknown keys are rejected by name.
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig from_json(const nlohmann::json& j, ModelConfig base);

  bool operator==(const ModelConfig&) const = default;
};

// Hash of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

}  // namespace mipcnet
