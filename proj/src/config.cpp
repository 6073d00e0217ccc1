// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/config.hpp"

#include <cstdio>

#include "mipcnet/errors.hpp"
#include "mipcnet/rng.hpp"

namespace mipcnet {

using nlohmann::json;

std::string to_string(GlPlacement p) {
  switch (p) {
    case GlPlacement::kNone: return "none";
    case GlPlacement::kFirst: return "1";
    case GlPlacement::kSecond: return "2";
    case GlPlacement::kThird: return "3";
    case GlPlacement::kAll: return "all";
  }
  return "none";
}

std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kMipc: return "mipc";
    case BlockKind::kPc: return "pc";
    case BlockKind::kIdentity: return "none";
  }
  return "mipc";
}

GlPlacement parse_gl_placement(const std::string& s) {
  if (s == "none") return GlPlacement::kNone;
  if (s == "1" || s == "1st" || s == "first") return GlPlacement::kFirst;
  if (s == "2" || s == "2nd" || s == "second") return GlPlacement::kSecond;
  if (s == "3" || s == "3rd" || s == "third") return GlPlacement::kThird;
  if (s == "all") return GlPlacement::kAll;
  throw ValidationError("gl_placement: expected one of none, 1, 2, 3, all; got '" + s + "'");
}

BlockKind parse_block_kind(const std::string& s) {
  if (s == "mipc") return BlockKind::kMipc;
  if (s == "pc") return BlockKind::kPc;
  if (s == "none" || s == "identity") return BlockKind::kIdentity;
  throw ValidationError("block: expected one of mipc, pc, none; got '" + s + "'");
}

bool gl_injects_level(GlPlacement p, int level) {
  switch (p) {
    case GlPlacement::kNone: return false;
    case GlPlacement::kFirst: return level == 1;
    case GlPlacement::kSecond: return level == 2;
    case GlPlacement::kThird: return level == 3;
    case GlPlacement::kAll: return true;
  }
  return false;
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.preset = "paper";
  c.input_size = 224;
  c.in_channels = 3;
  c.num_classes = 9;
  c.stem_base_width = 64;
  c.transformer = {768, 12, 12, 4};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.preset = "tiny";
  c.input_size = 64;
  c.in_channels = 1;
  c.num_classes = 4;
  c.stem_base_width = 16;
  c.transformer = {64, 2, 4, 4};
  return c;
}

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.preset = "micro";
  c.input_size = 32;
  c.in_channels = 1;
  c.num_classes = 3;
  c.stem_base_width = 4;
  c.transformer = {16, 1, 2, 2};
  return c;
}

ModelConfig ModelConfig::from_preset(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "tiny") return tiny();
  if (name == "micro") return micro();
  throw ValidationError("preset: expected paper, tiny or micro; got '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError(key + ": " + why); };
  if (in_channels < 1) fail("in_channels", "must be >= 1");
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (stem_base_width < 1) fail("stem_base_width", "must be >= 1");
  if (token_stride != 16) fail("token_stride", "the stem plus embedding fix the token stride at 16");
  if (input_size < 16 || input_size % 16 != 0) fail("input_size", "must be a positive multiple of 16");
  if (transformer.hidden_dim < 1) fail("transformer.hidden_dim", "must be >= 1");
  if (transformer.depth < 0) fail("transformer.depth", "must be >= 0");
  if (transformer.heads < 1 || transformer.hidden_dim % transformer.heads != 0) {
    fail("transformer.heads", "must divide hidden_dim");
  }
  if (transformer.mlp_ratio < 1) fail("transformer.mlp_ratio", "must be >= 1");
}

json ModelConfig::to_json() const {
  return json{{"preset", preset},
              {"input_size", input_size},
              {"in_channels", in_channels},
              {"num_classes", num_classes},
              {"stem_base_width", stem_base_width},
              {"transformer",
               {{"hidden_dim", transformer.hidden_dim},
                {"depth", transformer.depth},
                {"heads", transformer.heads},
                {"mlp_ratio", transformer.mlp_ratio}}},
              {"token_stride", token_stride},
              {"mipc_variant", mipc_variant.key()},
              {"block", to_string(block)},
              {"use_da_skips", use_da_skips},
              {"gl_placement", to_string(gl_placement)}};
}

namespace {

template <typename V>
V get_typed(const json& j, const std::string& key) {
  try {
    return j.get<V>();
  } catch (const json::exception&) {
    throw ValidationError(key + ": wrong type (" + j.dump() + ")");
  }
}

}  // namespace

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  ModelConfig base = tiny();
  if (j.contains("preset")) base = from_preset(get_typed<std::string>(j.at("preset"), "preset"));
  return from_json(j, base);
}

ModelConfig ModelConfig::from_json(const json& j, ModelConfig c) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "preset") c.preset = get_typed<std::string>(v, key);
    else if (key == "input_size") c.input_size = get_typed<int64_t>(v, key);
    else if (key == "in_channels") c.in_channels = get_typed<int64_t>(v, key);
    else if (key == "num_classes") c.num_classes = get_typed<int64_t>(v, key);
    else if (key == "stem_base_width") c.stem_base_width = get_typed<int64_t>(v, key);
    else if (key == "token_stride") c.token_stride = get_typed<int64_t>(v, key);
    else if (key == "mipc_variant") c.mipc_variant = MipcVariant::parse(get_typed<std::string>(v, key));
    else if (key == "block") c.block = parse_block_kind(get_typed<std::string>(v, key));
    else if (key == "use_da_skips") c.use_da_skips = get_typed<bool>(v, key);
    else if (key == "gl_placement") {
      c.gl_placement = parse_gl_placement(v.is_number_integer() ? std::to_string(v.get<int>())
                                                                 : get_typed<std::string>(v, key));
    } else if (key == "transformer") {
      if (!v.is_object()) throw ValidationError("transformer: must be an object");
      for (const auto& [tk, tv] : v.items()) {
        const std::string full = "transformer." + tk;
        if (tk == "hidden_dim") c.transformer.hidden_dim = get_typed<int64_t>(tv, full);
        else if (tk == "depth") c.transformer.depth = get_typed<int64_t>(tv, full);
        else if (tk == "heads") c.transformer.heads = get_typed<int64_t>(tv, full);
        else if (tk == "mlp_ratio") c.transformer.mlp_ratio = get_typed<int64_t>(tv, full);
        else throw ValidationError("unknown model config key '" + full + "'");
      }
    } else {
      throw ValidationError("unknown model config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::string config_hash(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace mipcnet
