// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "mipcnet/errors.hpp"
#include "mipcnet/rng.hpp"

namespace mipcnet::ablation {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Axis a) {
  switch (a) {
    case Axis::kTable4: return "table4";
    case Axis::kTable5: return "table5";
    case Axis::kTable6: return "table6";
  }
  return "table5";
}

Axis parse_axis(const std::string& s) {
  if (s == "table4" || s == "mutual_inclusion") return Axis::kTable4;
  if (s == "table5" || s == "mipc_variant") return Axis::kTable5;
  if (s == "table6" || s == "gl_placement") return Axis::kTable6;
  throw ValidationError("axis: expected table4, table5 or table6; got '" + s + "'");
}

AblationSpec AblationSpec::defaults(Axis axis) {
  AblationSpec s;
  s.axis = axis;
  s.train.max_iterations = 300;
  s.data.num_samples = 20;
  s.data.train_fraction = 0.8;
  return s;
}

std::vector<Cell> AblationSpec::cells() const {
  std::vector<Cell> out;
  auto with = [&](const std::string& name, auto&& edit) {
    ModelConfig m = base;
    edit(m);
    m.validate();
    out.push_back({name, m});
  };
  switch (axis) {
    case Axis::kTable4:
      with("PC", [](ModelConfig& m) { m.block = BlockKind::kPc; });
      with("MIPC", [](ModelConfig& m) { m.block = BlockKind::kMipc; });
      break;
    case Axis::kTable5:
      for (const auto& v : MipcVariant::all()) {
        with(v.name(), [&](ModelConfig& m) {
          m.block = BlockKind::kMipc;
          m.mipc_variant = v;
        });
      }
      break;
    case Axis::kTable6:
      for (auto p : {GlPlacement::kNone, GlPlacement::kFirst, GlPlacement::kSecond, GlPlacement::kThird,
                     GlPlacement::kAll}) {
        with("GL " + mipcnet::to_string(p), [&](ModelConfig& m) { m.gl_placement = p; });
      }
      with("baseline", [](ModelConfig& m) {
        m.use_da_skips = false;
        m.gl_placement = GlPlacement::kNone;
        m.block = BlockKind::kIdentity;
      });
      break;
  }
  return out;
}

json AblationSpec::to_json() const {
  return json{{"axis", to_string(axis)},
              {"base", base.to_json()},
              {"train", train.to_json()},
              {"data", data.to_json()},
              {"seeds", seeds}};
}

json Row::to_json() const {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json s = json::array();
  for (const auto& r : seeds) s.push_back({{"seed", r.seed}, {"dice", r.dice}, {"hd", r.hd}, {"seconds", r.seconds}});
  return json{{"cell", cell},
              {"config_hash", config_hash},
              {"parameters", parameters},
              {"dsc_mean", num(dsc_mean)},
              {"dsc_std", num(dsc_std)},
              {"hd_mean", num(hd_mean)},
              {"hd_std", num(hd_std)},
              {"seconds", seconds},
              {"status", status},
              {"seeds", s}};
}

Row Row::from_json(const json& j) {
  auto num = [&](const char* k) {
    return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
  };
  Row r;
  r.cell = j.at("cell").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.parameters = j.at("parameters").get<int64_t>();
  r.dsc_mean = num("dsc_mean");
  r.dsc_std = num("dsc_std");
  r.hd_mean = num("hd_mean");
  r.hd_std = num("hd_std");
  r.seconds = j.at("seconds").get<double>();
  r.status = j.at("status").get<std::string>();
  for (const auto& s : j.at("seeds")) {
    r.seeds.push_back({s.at("seed").get<uint64_t>(), s.at("dice").get<double>(), s.at("hd").get<double>(),
                       s.at("seconds").get<double>()});
  }
  return r;
}

json ResultTable::to_json() const {
  json rows_j = json::array();
  for (const auto& r : rows) rows_j.push_back(r.to_json());
  return json{{"axis", to_string(axis)}, {"label", label}, {"seconds", seconds}, {"rows", rows_j}};
}

ResultTable ResultTable::from_json(const json& j) {
  ResultTable t;
  t.axis = parse_axis(j.at("axis").get<std::string>());
  t.label = j.value("label", std::string(kSyntheticLabel));
  t.seconds = j.value("seconds", 0.0);
  for (const auto& r : j.at("rows")) t.rows.push_back(Row::from_json(r));
  return t;
}

std::string cell_hash(const Cell& cell, const AblationSpec& spec) {
  json train = spec.train.to_json();
  train.erase("seed");
  return config_hash(json{{"model", cell.model.to_json()}, {"train", train}, {"data", spec.data.to_json()},
                          {"seeds", spec.seeds}, {"version", train::kVersion}});
}

SeedResult train_and_score(const ModelConfig& model, const train::TrainConfig& cfg, const data::Dataset& ds) {
  SeedResult r;
  r.seed = cfg.seed;
  const auto start = std::chrono::steady_clock::now();
  const data::Dataset train_set = ds.train_split();
  const data::Dataset test_set = ds.test_split();
  auto result = train::train(model, cfg, train_set);
  const auto report = train::evaluate(*result.model, test_set);
  r.dice = report.mean_dice;
  r.hd = report.mean_hd;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {m, sd};
}

std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// DSC is reported in percent, HD in pixels, both with two decimals.
std::string dsc_str(double v) { return fixed(100.0 * v, 2); }
std::string hd_str(double v) { return fixed(v, 2); }

double parse_num(const std::string& s) {
  if (s.empty() || s == "n/a") return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw ValidationError("not a number: '" + s + "'");
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << text;
}

}  // namespace

ResultTable run_ablation(const AblationSpec& spec, const std::optional<fs::path>& cache_dir,
                         const std::function<void(const std::string&)>& log, const CellTrainer& trainer) {
  if (spec.seeds.empty()) throw ValidationError("seeds: at least one seed is required");
  spec.train.validate();
  const auto start = std::chrono::steady_clock::now();
  const data::Dataset ds = data::generate_synthetic(spec.data);
  ResultTable table;
  table.axis = spec.axis;
  for (const auto& cell : spec.cells()) {
    const std::string hash = cell_hash(cell, spec);
    const fs::path cached = cache_dir ? *cache_dir / (hash + ".json") : fs::path();
    if (cache_dir && fs::exists(cached)) {
      try {
        std::ifstream f(cached);
        Row row = Row::from_json(json::parse(f));
        row.cell = cell.name;
        if (log) log(cell.name + ": cached (" + hash + ")");
        table.rows.push_back(std::move(row));
        continue;
      } catch (const std::exception&) {
        // Unreadable cache entries are recomputed.
      }
    }
    Row row;
    row.cell = cell.name;
    row.config_hash = hash;
    const auto cell_start = std::chrono::steady_clock::now();
    try {
      row.parameters = MipcNet<float>(cell.model, 0).parameter_count();
      if (ds.num_classes != cell.model.num_classes) {
        throw ValidationError("dataset has " + std::to_string(ds.num_classes) + " classes, model expects " +
                              std::to_string(cell.model.num_classes));
      }
      std::vector<double> dice, hd;
      for (uint64_t seed : spec.seeds) {
        train::TrainConfig tc = spec.train;
        tc.seed = seed;
        SeedResult sr = trainer(cell.model, tc, ds);
        sr.seed = seed;
        if (log) log(cell.name + " seed " + std::to_string(seed) + ": DSC " + dsc_str(sr.dice) + ", HD " + hd_str(sr.hd));
        dice.push_back(sr.dice);
        hd.push_back(sr.hd);
        row.seeds.push_back(sr);
      }
      std::tie(row.dsc_mean, row.dsc_std) = mean_std(dice);
      std::tie(row.hd_mean, row.hd_std) = mean_std(hd);
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      row.dsc_mean = row.dsc_std = row.hd_mean = row.hd_std = std::numeric_limits<double>::quiet_NaN();
      if (log) log(cell.name + ": " + row.status);
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - cell_start).count();
    if (cache_dir && row.status == "ok") {
      write_text(cached, row.to_json().dump(2) + "\n");
    }
    table.rows.push_back(std::move(row));
  }
  table.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return table;
}

std::string to_markdown(const ResultTable& t) {
  std::ostringstream os;
  os << "**" << to_string(t.axis) << "** (" << t.label << ")\n\n";
  os << "| Cell | DSC↑ (%) | HD↓ (px) | Parameters | Config hash | Status |\n";
  os << "|---|---|---|---|---|---|\n";
  for (const auto& r : t.rows) {
    const bool ok = std::isfinite(r.dsc_mean);
    os << "| " << r.cell << " | " << (ok ? dsc_str(r.dsc_mean) + " ± " + dsc_str(r.dsc_std) : "n/a") << " | "
       << (ok ? hd_str(r.hd_mean) + " ± " + hd_str(r.hd_std) : "n/a") << " | " << r.parameters << " | "
       << r.config_hash << " | " << r.status << " |\n";
  }
  return os.str();
}

std::string to_csv(const ResultTable& t) {
  std::ostringstream os;
  os << "# " << t.label << "\n";
  os << "cell,dsc_mean_pct_up,dsc_std_pct,hd_mean_px_down,hd_std_px,parameters,config_hash,status\n";
  for (const auto& r : t.rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    os << r.cell << ',' << dsc_str(r.dsc_mean) << ',' << dsc_str(r.dsc_std) << ',' << hd_str(r.hd_mean) << ','
       << hd_str(r.hd_std) << ',' << r.parameters << ',' << r.config_hash << ',' << status << '\n';
  }
  return os.str();
}

std::vector<std::vector<double>> parse_markdown_numbers(const std::string& md) {
  std::vector<std::vector<double>> out;
  std::istringstream is(md);
  std::string line;
  int table_line = 0;
  while (std::getline(is, line)) {
    if (line.rfind("|", 0) != 0) continue;
    if (table_line++ < 2) continue;  // header and separator
    const auto cols = split(line, '|');
    if (cols.size() < 4) throw ValidationError("malformed markdown row: " + line);
    std::vector<double> nums;
    for (size_t c : {2u, 3u}) {
      const std::string cell = trim(cols[c]);
      const auto pm = cell.find("±");
      if (pm == std::string::npos) {
        nums.push_back(parse_num(cell));
        nums.push_back(parse_num(cell));
      } else {
        nums.push_back(parse_num(trim(cell.substr(0, pm))));
        nums.push_back(parse_num(trim(cell.substr(pm + std::string("±").size()))));
      }
    }
    out.push_back(nums);
  }
  return out;
}

std::vector<std::vector<double>> parse_csv_numbers(const std::string& csv) {
  std::vector<std::vector<double>> out;
  std::istringstream is(csv);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    const auto cols = split(line, ',');
    if (cols.size() < 5) throw ValidationError("malformed csv row: " + line);
    out.push_back({parse_num(cols[1]), parse_num(cols[2]), parse_num(cols[3]), parse_num(cols[4])});
  }
  return out;
}

std::string to_svg(const ResultTable& t) {
  const double width = 720, height = 400, left = 60, right = 60, top = 50, bottom = 90;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  double hd_max = 1.0;
  for (const auto& r : t.rows) {
    if (std::isfinite(r.hd_mean)) hd_max = std::max(hd_max, r.hd_mean + r.hd_std);
  }
  hd_max *= 1.1;
  const size_t n = std::max<size_t>(1, t.rows.size());
  const double slot = plot_w / static_cast<double>(n);
  auto y_dsc = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };
  auto y_hd = [&](double v) { return top + plot_h * (1.0 - std::clamp(v / hd_max, 0.0, 1.0)); };

  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << to_string(t.axis)
     << ": DSC↑ (bars) and HD↓ (line)</text>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"36\" text-anchor=\"middle\" fill=\"#a00\">" << escape_xml(t.label)
     << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left + plot_w << "\" y1=\"" << top << "\" x2=\"" << left + plot_w << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
     << top + plot_h << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double frac = k / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << y_dsc(frac) + 4 << "\" text-anchor=\"end\">" << 100 * frac
       << "</text>\n";
    os << "<text x=\"" << left + plot_w + 6 << "\" y=\"" << y_dsc(frac) + 4 << "\">" << hd_max * frac
       << "</text>\n";
  }
  os << "<text x=\"14\" y=\"" << top + plot_h / 2 << "\" transform=\"rotate(-90 14 " << top + plot_h / 2
     << ")\" text-anchor=\"middle\">DSC (%)</text>\n";
  os << "<text x=\"" << width - 14 << "\" y=\"" << top + plot_h / 2 << "\" transform=\"rotate(90 " << width - 14
     << ' ' << top + plot_h / 2 << ")\" text-anchor=\"middle\">HD (px)</text>\n";

  std::string line_pts;
  for (size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const double bw = slot * 0.5;
    if (std::isfinite(r.dsc_mean)) {
      os << "<rect x=\"" << cx - bw / 2 << "\" y=\"" << y_dsc(r.dsc_mean) << "\" width=\"" << bw << "\" height=\""
         << top + plot_h - y_dsc(r.dsc_mean) << "\" fill=\"#4a7ebb\"/>\n";
      os << "<line x1=\"" << cx << "\" y1=\"" << y_dsc(r.dsc_mean - r.dsc_std) << "\" x2=\"" << cx << "\" y2=\""
         << y_dsc(r.dsc_mean + r.dsc_std) << "\" stroke=\"black\"/>\n";
      line_pts += std::to_string(cx) + "," + std::to_string(y_hd(r.hd_mean)) + " ";
      os << "<circle cx=\"" << cx << "\" cy=\"" << y_hd(r.hd_mean) << "\" r=\"3\" fill=\"#c0392b\"/>\n";
    } else {
      os << "<text x=\"" << cx << "\" y=\"" << top + plot_h - 6 << "\" text-anchor=\"middle\" fill=\"#a00\">failed</text>\n";
    }
    os << "<text x=\"" << cx << "\" y=\"" << top + plot_h + 14 << "\" text-anchor=\"end\" transform=\"rotate(-30 " << cx
       << ' ' << top + plot_h + 14 << ")\">" << escape_xml(r.cell) << "</text>\n";
  }
  if (!line_pts.empty()) {
    os << "<polyline points=\"" << line_pts << "\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<fs::path> emit_report(const ResultTable& t, const fs::path& out, const std::string& stem) {
  if (t.rows.empty()) throw ValidationError("cannot emit a report for an empty table");
  const std::vector<fs::path> paths{out / "tables" / (stem + ".md"), out / "tables" / (stem + ".csv"),
                                    out / "tables" / (stem + ".json"), out / "plots" / (stem + ".svg")};
  write_text(paths[0], to_markdown(t));
  write_text(paths[1], to_csv(t));
  write_text(paths[2], t.to_json().dump(2) + "\n");
  write_text(paths[3], to_svg(t));
  return paths;
}

}  // namespace mipcnet::ablation
