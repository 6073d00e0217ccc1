// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>

#include "mipcnet/config.hpp"
#include "mipcnet/errors.hpp"
#include "mipcnet/rng.hpp"
#include "mipcnet/training.hpp"

namespace mipcnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot read " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(bytes)));
  return buf;
}

json RunManifest::to_json(const fs::path& out) const {
  json arts = json::array();
  for (const auto& p : artifacts) {
    std::error_code ec;
    fs::path rel = fs::relative(p, out, ec);
    if (ec || rel.empty()) rel = p;
    arts.push_back({{"path", rel.generic_string()}, {"fnv1a", file_hash(p)}, {"bytes", fs::file_size(p)}});
  }
  return json{{"version", train::kVersion},
              {"command", command},
              {"argv", argv},
              {"config", config},
              {"config_hash", config_hash(config)},
              {"seeds", seeds},
              {"artifacts", arts}};
}

fs::path RunManifest::write(const fs::path& out) const {
  const fs::path path = out / "manifests" / (command + "-" + config_hash(config) + ".json");
  fs::create_directories(path.parent_path());
  const json j = to_json(out);
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << j.dump(2) << "\n";
  return path;
}

}  // namespace mipcnet
