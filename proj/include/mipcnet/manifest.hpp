// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace mipcnet {

// FNV-1a of the file bytes as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config;  // fully resolved
  std::vector<uint64_t> seeds;
  std::vector<std::filesystem::path> artifacts;

  // Artifacts are hashed at write time and recorded relative to `out`.
  nlohmann::json to_json(const std::filesystem::path& out) const;
  // Writes <out>/manifests/<command>-<config hash>.json and returns the path.
  std::filesystem::path write(const std::filesystem::path& out) const;
};

}  // namespace mipcnet
