// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mipcnet/config.hpp"
#include "mipcnet/data.hpp"
#include "mipcnet/training.hpp"

namespace mipcnet::ablation {

inline constexpr const char* kSyntheticLabel = "synthetic analog — not paper numbers";

// table4: mutual inclusion on/off; table5: the four MIPC variants;
// table6: GL placement, plus the baseline without DA, MIPC or GL.
enum class Axis { kTable4, kTable5, kTable6 };

std::string to_string(Axis a);
Axis parse_axis(const std::string& s);

struct Cell {
  std::string name;
  ModelConfig model;
};

struct AblationSpec {
  Axis axis = Axis::kTable5;
  ModelConfig base = ModelConfig::tiny();
  train::TrainConfig train;
  data::SyntheticSpec data;
  std::vector<uint64_t> seeds{0, 1, 2};

  // Tiny model, 300 iterations, 20 synthetic samples (16 train / 4 test).
  static AblationSpec defaults(Axis axis);
  std::vector<Cell> cells() const;
  nlohmann::json to_json() const;
};

struct SeedResult {
  uint64_t seed = 0;
  double dice = 0, hd = 0, seconds = 0;
};

struct Row {
  std::string cell;
  std::string config_hash;
  int64_t parameters = 0;
  double dsc_mean = 0, dsc_std = 0, hd_mean = 0, hd_std = 0;
  double seconds = 0;
  std::string status = "ok";  // "ok" or "failed: <reason>"
  std::vector<SeedResult> seeds;
  nlohmann::json to_json() const;
  static Row from_json(const nlohmann::json& j);
};

struct ResultTable {
  Axis axis = Axis::kTable5;
  std::vector<Row> rows;
  double seconds = 0;
  std::string label = kSyntheticLabel;

  nlohmann::json to_json() const;
  static ResultTable from_json(const nlohmann::json& j);
};

// Hash of everything that determines a cell's result.
std::string cell_hash(const Cell& cell, const AblationSpec& spec);

using CellTrainer = std::function<SeedResult(const ModelConfig&, const train::TrainConfig&, const data::Dataset&)>;

// Trains on the train split, evaluates on the test split.
SeedResult train_and_score(const ModelConfig& model, const train::TrainConfig& cfg, const data::Dataset& ds);

// Runs every cell x seed. With `cache_dir`, each finished cell is stored as
// <hash>.json and reused on the next run. A failing cell becomes a failed
// row; the remaining cells still run.
ResultTable run_ablation(const AblationSpec& spec, const std::optional<std::filesystem::path>& cache_dir = {},
                         const std::function<void(const std::string&)>& log = {},
                         const CellTrainer& trainer = train_and_score);

// Columns: cell, DSC (up), HD (down), parameters, config hash, status.
std::string to_markdown(const ResultTable& t);
std::string to_csv(const ResultTable& t);
// Bars for DSC with std whiskers, a line for HD on a second axis.
std::string to_svg(const ResultTable& t);

// Numeric content (rows x [dsc_mean, dsc_std, hd_mean, hd_std]) parsed back
// from the emitted text, for round-trip checks.
std::vector<std::vector<double>> parse_markdown_numbers(const std::string& md);
std::vector<std::vector<double>> parse_csv_numbers(const std::string& csv);

// Writes tables/<stem>.md, tables/<stem>.csv, tables/<stem>.json and
// plots/<stem>.svg under `out`; returns the written paths.
std::vector<std::filesystem::path> emit_report(const ResultTable& t, const std::filesystem::path& out,
                                               const std::string& stem);

}  // namespace mipcnet::ablation
