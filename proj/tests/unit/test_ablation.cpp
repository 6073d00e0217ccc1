// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "mipcnet/ablation.hpp"
#include "mipcnet/errors.hpp"
#include "test_util.hpp"

using namespace mipcnet;
using namespace mipcnet::ablation;
namespace fs = std::filesystem;

namespace {

// Deterministic stand-in for training: scores derive from the config and seed.
struct FakeTrainer {
  int* calls;
  std::string fail_on;  // block name that throws
  SeedResult operator()(const ModelConfig& m, const train::TrainConfig& tc, const data::Dataset&) const {
    ++*calls;
    const std::string h = config_hash(m.to_json());
    if (!fail_on.empty() && to_string(m.block) == fail_on) throw RuntimeFailure("boom");
    const double u = static_cast<double>(std::stoull(h.substr(0, 6), nullptr, 16)) / 16777216.0;
    return {tc.seed, 0.5 + 0.4 * u + 0.01 * static_cast<double>(tc.seed), 3.0 + 10 * u, 0.0};
  }
};

AblationSpec quick(Axis axis) {
  AblationSpec s = AblationSpec::defaults(axis);
  s.data.num_samples = 5;
  s.seeds = {0, 1};
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ResultTable sample_table() {
  ResultTable t;
  t.axis = Axis::kTable5;
  Row a;
  a.cell = "both";
  a.config_hash = "0123456789abcdef";
  a.parameters = 1234;
  a.dsc_mean = 0.81234;
  a.dsc_std = 0.0123;
  a.hd_mean = 7.456;
  a.hd_std = 1.25;
  Row b = a;
  b.cell = "neither";
  b.dsc_mean = 0.5;
  b.dsc_std = 0;
  b.hd_mean = 12.0;
  b.hd_std = 0.004;
  Row c = a;
  c.cell = "broken";
  c.status = "failed: diverged, twice";
  c.dsc_mean = c.dsc_std = c.hd_mean = c.hd_std = std::numeric_limits<double>::quiet_NaN();
  t.rows = {a, b, c};
  return t;
}

void expect_same_numbers(const std::vector<std::vector<double>>& got, const std::vector<std::vector<double>>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (size_t r = 0; r < got.size(); ++r) {
    ASSERT_EQ(got[r].size(), 4u);
    for (size_t c = 0; c < 4; ++c) {
      if (std::isnan(want[r][c])) {
        EXPECT_TRUE(std::isnan(got[r][c])) << r << "," << c;
      } else {
        EXPECT_DOUBLE_EQ(got[r][c], want[r][c]) << r << "," << c;
      }
    }
  }
}

}  // namespace

TEST(Axis, ParsesNamesAndAliases) {
  EXPECT_EQ(parse_axis("table4"), Axis::kTable4);
  EXPECT_EQ(parse_axis("mipc_variant"), Axis::kTable5);
  EXPECT_EQ(parse_axis("gl_placement"), Axis::kTable6);
  EXPECT_THROW(parse_axis("table7"), ValidationError);
}

TEST(Cells, CountsPerAxis) {
  EXPECT_EQ(AblationSpec::defaults(Axis::kTable4).cells().size(), 2u);
  EXPECT_EQ(AblationSpec::defaults(Axis::kTable5).cells().size(), 4u);
  const auto t6 = AblationSpec::defaults(Axis::kTable6).cells();
  EXPECT_EQ(t6.size(), 6u);
  EXPECT_EQ(t6.back().name, "baseline");
  EXPECT_FALSE(t6.back().model.use_da_skips);
  EXPECT_EQ(t6.back().model.block, BlockKind::kIdentity);
}

TEST(Cells, HashesAreDistinctAndIgnoreTheTrainSeed) {
  for (auto axis : {Axis::kTable4, Axis::kTable5, Axis::kTable6}) {
    AblationSpec s = AblationSpec::defaults(axis);
    std::set<std::string> hashes;
    for (const auto& c : s.cells()) hashes.insert(cell_hash(c, s));
    EXPECT_EQ(hashes.size(), s.cells().size()) << to_string(axis);
    const std::string before = cell_hash(s.cells()[0], s);
    s.train.seed = 77;
    EXPECT_EQ(cell_hash(s.cells()[0], s), before);
    s.seeds = {5};
    EXPECT_NE(cell_hash(s.cells()[0], s), before);
  }
}

TEST(Cells, PcHasFewerParametersThanMipc) {
  const auto cells = AblationSpec::defaults(Axis::kTable4).cells();
  ASSERT_EQ(cells[0].name, "PC");
  EXPECT_LT(MipcNet<float>(cells[0].model, 0).parameter_count(), MipcNet<float>(cells[1].model, 0).parameter_count());
}

TEST(RunAblation, AggregatesSeedsWithSampleStd) {
  int calls = 0;
  const auto t = run_ablation(quick(Axis::kTable4), std::nullopt, {}, FakeTrainer{&calls, ""});
  EXPECT_EQ(calls, 4);
  ASSERT_EQ(t.rows.size(), 2u);
  for (const auto& r : t.rows) {
    ASSERT_EQ(r.seeds.size(), 2u);
    EXPECT_EQ(r.status, "ok");
    EXPECT_GT(r.parameters, 0);
    EXPECT_NEAR(r.dsc_mean, 0.5 * (r.seeds[0].dice + r.seeds[1].dice), 1e-15);
    EXPECT_NEAR(r.dsc_std, std::abs(r.seeds[0].dice - r.seeds[1].dice) / std::sqrt(2.0), 1e-15);
  }
}

TEST(RunAblation, DeterministicAndOrderIndependent) {
  int calls = 0;
  const auto a = run_ablation(quick(Axis::kTable5), std::nullopt, {}, FakeTrainer{&calls, ""});
  const auto b = run_ablation(quick(Axis::kTable5), std::nullopt, {}, FakeTrainer{&calls, ""});
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].dsc_mean, b.rows[i].dsc_mean);
    EXPECT_EQ(a.rows[i].config_hash, b.rows[i].config_hash);
  }
  AblationSpec reversed = quick(Axis::kTable5);
  reversed.seeds = {1, 0};
  const auto c = run_ablation(reversed, std::nullopt, {}, FakeTrainer{&calls, ""});
  for (size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_NEAR(a.rows[i].dsc_mean, c.rows[i].dsc_mean, 1e-15);
    EXPECT_NEAR(a.rows[i].dsc_std, c.rows[i].dsc_std, 1e-15);
  }
}

TEST(RunAblation, FailingCellIsRecordedAndOthersRun) {
  int calls = 0;
  std::vector<std::string> log;
  const auto t = run_ablation(quick(Axis::kTable4), std::nullopt, [&](const std::string& m) { log.push_back(m); },
                              FakeTrainer{&calls, "pc"});
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].status, "failed: boom");
  EXPECT_TRUE(std::isnan(t.rows[0].dsc_mean));
  EXPECT_EQ(t.rows[1].status, "ok");
  EXPECT_EQ(t.rows[1].seeds.size(), 2u);
  EXPECT_FALSE(log.empty());
  EXPECT_NE(to_markdown(t).find("n/a"), std::string::npos);
}

TEST(RunAblation, CacheIsReusedAcrossAxes) {
  const auto dir = testutil::temp_dir("cache");
  int calls = 0;
  const auto first = run_ablation(quick(Axis::kTable4), dir, {}, FakeTrainer{&calls, ""});
  EXPECT_EQ(calls, 4);
  const auto second = run_ablation(quick(Axis::kTable4), dir, {}, FakeTrainer{&calls, ""});
  EXPECT_EQ(calls, 4);
  for (size_t i = 0; i < 2; ++i) EXPECT_EQ(first.rows[i].dsc_mean, second.rows[i].dsc_mean);
  // The default MIPC cell of table4 is also the "both" cell of table5.
  run_ablation(quick(Axis::kTable5), dir, {}, FakeTrainer{&calls, ""});
  EXPECT_EQ(calls, 4 + 2 * 3);
}

TEST(RunAblation, FailedCellsAreNotCached) {
  const auto dir = testutil::temp_dir("nocache");
  int calls = 0;
  run_ablation(quick(Axis::kTable4), dir, {}, FakeTrainer{&calls, "pc"});
  const int after_first = calls;
  run_ablation(quick(Axis::kTable4), dir, {}, FakeTrainer{&calls, ""});
  EXPECT_EQ(calls, after_first + 2);
}

TEST(RunAblation, RejectsEmptySeeds) {
  AblationSpec s = quick(Axis::kTable4);
  s.seeds.clear();
  int calls = 0;
  EXPECT_THROW(run_ablation(s, std::nullopt, {}, FakeTrainer{&calls, ""}), ValidationError);
}

TEST(Report, MarkdownAndCsvRoundTripNumbers) {
  const auto t = sample_table();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<std::vector<double>> want{{81.23, 1.23, 7.46, 1.25}, {50.00, 0.00, 12.00, 0.00},
                                              {nan, nan, nan, nan}};
  expect_same_numbers(parse_markdown_numbers(to_markdown(t)), want);
  expect_same_numbers(parse_csv_numbers(to_csv(t)), want);
}

TEST(Report, SingleRowTable) {
  ResultTable t = sample_table();
  t.rows.resize(1);
  EXPECT_EQ(parse_markdown_numbers(to_markdown(t)).size(), 1u);
  EXPECT_EQ(parse_csv_numbers(to_csv(t)).size(), 1u);
  EXPECT_NE(to_svg(t).find("</svg>"), std::string::npos);
}

TEST(Report, ColumnsCarryDirectionAndLabel) {
  const auto t = sample_table();
  const std::string md = to_markdown(t);
  EXPECT_NE(md.find("DSC↑"), std::string::npos);
  EXPECT_NE(md.find("HD↓"), std::string::npos);
  EXPECT_NE(md.find(kSyntheticLabel), std::string::npos);
  const std::string csv = to_csv(t);
  EXPECT_NE(csv.find("dsc_mean_pct_up"), std::string::npos);
  EXPECT_NE(csv.find("hd_mean_px_down"), std::string::npos);
  // Commas inside a status do not shift the columns.
  std::istringstream is(csv);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7) << line;
  }
}

TEST(Report, SvgIsBalancedAndNamesEveryCell) {
  const std::string svg = to_svg(sample_table());
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_EQ(std::count(svg.begin(), svg.end(), '<'), std::count(svg.begin(), svg.end(), '>'));
  for (const char* name : {"both", "neither", "broken"}) EXPECT_NE(svg.find(name), std::string::npos) << name;
  EXPECT_NE(svg.find("<polyline"), std::string::npos);
}

TEST(Report, EmitWritesAllFormats) {
  const auto dir = testutil::temp_dir("emit");
  const auto paths = emit_report(sample_table(), dir, "table5");
  ASSERT_EQ(paths.size(), 4u);
  for (const auto& p : paths) EXPECT_TRUE(fs::exists(p)) << p;
  EXPECT_TRUE(fs::exists(dir / "plots" / "table5.svg"));
  const auto back = ResultTable::from_json(nlohmann::json::parse(slurp(dir / "tables" / "table5.json")));
  EXPECT_EQ(to_markdown(back), slurp(dir / "tables" / "table5.md"));
  EXPECT_THROW(emit_report(ResultTable{}, dir, "empty"), ValidationError);
}

TEST(TrainAndScore, ShortRealRun) {
  ModelConfig m = ModelConfig::micro();
  train::TrainConfig tc;
  tc.max_iterations = 6;
  tc.batch_size = 2;
  data::SyntheticSpec ds;
  ds.num_samples = 5;
  ds.image_size = m.input_size;
  ds.num_classes = m.num_classes;
  const auto r = train_and_score(m, tc, data::generate_synthetic(ds));
  EXPECT_GE(r.dice, 0.0);
  EXPECT_LE(r.dice, 1.0);
  EXPECT_TRUE(std::isfinite(r.hd));
  EXPECT_GT(r.seconds, 0.0);
}
