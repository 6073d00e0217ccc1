// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mipcnet/ablation.hpp"
#include "mipcnet/config.hpp"
#include "mipcnet/data.hpp"
#include "mipcnet/errors.hpp"
#include "mipcnet/gradcheck.hpp"
#include "mipcnet/manifest.hpp"
#include "mipcnet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mipcnet;

namespace {

struct Globals {
  std::string config_path;
  uint64_t seed = 0;
  std::string preset = "tiny";
  std::string out = "out";
  CLI::Option* seed_opt = nullptr;
  CLI::Option* preset_opt = nullptr;
};

// The config file holds any of {"preset", "model", "train", "data",
// "ablation"}; command-line flags override it.
json read_config(const Globals& g) {
  if (g.config_path.empty()) return json::object();
  if (!fs::exists(g.config_path)) throw ValidationError("config: file not found: " + g.config_path);
  std::ifstream f(g.config_path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + g.config_path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key != "preset" && key != "model" && key != "train" && key != "data" && key != "ablation") {
      throw ValidationError("config: unknown key '" + key + "'");
    }
  }
  return j;
}

json section(const json& cfg, const char* key) {
  if (!cfg.contains(key)) return json::object();
  if (!cfg.at(key).is_object()) throw ValidationError(std::string("config: '") + key + "' must be an object");
  return cfg.at(key);
}

std::string preset_name(const Globals& g, const json& cfg) {
  if (g.preset_opt->count() > 0) return g.preset;
  if (cfg.contains("preset")) return cfg.at("preset").get<std::string>();
  return g.preset;
}

ModelConfig resolve_model(const Globals& g, const json& cfg) {
  ModelConfig m = ModelConfig::from_json(section(cfg, "model"), ModelConfig::from_preset(preset_name(g, cfg)));
  m.validate();
  return m;
}

train::TrainConfig resolve_train(const Globals& g, const json& cfg, train::TrainConfig base) {
  train::TrainConfig t = train::TrainConfig::from_json(section(cfg, "train"), base);
  if (g.seed_opt->count() > 0) t.seed = g.seed;
  return t;
}

data::SyntheticSpec data_defaults(const ModelConfig& m) {
  data::SyntheticSpec s;
  s.num_classes = m.num_classes;
  s.image_size = m.input_size;
  s.channels = m.in_channels;
  return s;
}

data::SyntheticSpec resolve_data(const Globals& g, const json& cfg, data::SyntheticSpec base) {
  data::SyntheticSpec s = data::SyntheticSpec::from_json(section(cfg, "data"), base);
  if (g.seed_opt->count() > 0) s.seed = g.seed;
  return s;
}

template <typename T>
void apply(const CLI::Option* opt, T& target, const T& value) {
  if (opt->count() > 0) target = value;
}

std::vector<std::string> argv_vector(int argc, char** argv) { return {argv, argv + argc}; }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << text;
}

data::Dataset split_of(const data::Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train_split();
  if (split == "test") return ds.test_split();
  if (split == "all") return ds;
  throw ValidationError("split: expected train, test or all; got '" + split + "'");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mipcnet: segmentation training, evaluation and ablation harness"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "JSON config file");
  g.seed_opt = app.add_option("--seed", g.seed, "Seed for data generation and training");
  g.preset_opt = app.add_option("--preset", g.preset, "Model preset")->check(CLI::IsMember({"paper", "tiny", "micro"}));
  app.add_option("--out", g.out, "Output directory")->capture_default_str();
  app.set_version_flag("--version", train::kVersion);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic dataset as PNG pairs");
  data::SyntheticSpec sd;
  std::string synth_dir;
  auto* o_num = synth->add_option("--num-samples", sd.num_samples);
  auto* o_k = synth->add_option("--num-classes", sd.num_classes);
  auto* o_size = synth->add_option("--image-size", sd.image_size);
  auto* o_ch = synth->add_option("--channels", sd.channels);
  auto* o_smin = synth->add_option("--shapes-min", sd.shapes_min);
  auto* o_smax = synth->add_option("--shapes-max", sd.shapes_max);
  auto* o_noise = synth->add_option("--noise-sigma", sd.noise_sigma);
  auto* o_frac = synth->add_option("--train-fraction", sd.train_fraction);
  synth->add_option("--dir", synth_dir, "Target directory (default <out>/data)");

  // train
  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint");
  train::TrainConfig tf;
  std::string train_data, train_split = "train", ckpt_name = "model.ckpt", schedule;
  int64_t train_samples = 0;
  trn->add_option("--data", train_data, "Dataset folder (default: synthetic from the config)");
  trn->add_option("--split", train_split)->capture_default_str();
  auto* o_it = trn->add_option("--iterations", tf.max_iterations);
  auto* o_lr = trn->add_option("--lr", tf.lr);
  auto* o_bs = trn->add_option("--batch-size", tf.batch_size);
  auto* o_ev = trn->add_option("--eval-every", tf.eval_every);
  auto* o_sched = trn->add_option("--schedule", schedule)->check(CLI::IsMember({"constant", "poly"}));
  auto* o_aug = trn->add_flag("--augment", tf.augment);
  auto* o_tn = trn->add_option("--num-samples", train_samples, "Synthetic sample count");
  trn->add_option("--checkpoint", ckpt_name, "File name under <out>/checkpoints")->capture_default_str();

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_split = "test", eval_stem = "metrics";
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint (default <out>/checkpoints/model.ckpt)");
  ev->add_option("--data", eval_data, "Dataset folder (default: synthetic from the config)");
  ev->add_option("--split", eval_split)->capture_default_str();
  ev->add_option("--stem", eval_stem, "Output name under <out>/tables")->capture_default_str();

  // ablate
  auto* abl = app.add_subcommand("ablate", "Run an ablation grid");
  std::string axis_name = "table5";
  std::vector<uint64_t> seeds;
  int64_t abl_iters = 0, abl_samples = 0;
  bool no_cache = false;
  auto* o_axis = abl->add_option("--axis", axis_name, "table4 | table5 | table6")->capture_default_str();
  auto* o_seeds = abl->add_option("--seeds", seeds, "Comma-separated seeds per cell")->delimiter(',');
  auto* o_ait = abl->add_option("--iterations", abl_iters);
  auto* o_asn = abl->add_option("--num-samples", abl_samples);
  abl->add_flag("--no-cache", no_cache, "Recompute cells even when cached");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  bool no_model = false;
  gc->add_flag("--no-model", no_model, "Skip the end-to-end micro model");

  // report
  auto* rep = app.add_subcommand("report", "Re-emit tables and plots from a result JSON");
  std::string rep_input, rep_stem;
  rep->add_option("--input", rep_input, "ResultTable or MetricsReport JSON")->required();
  rep->add_option("--stem", rep_stem, "Output name (default: input file stem)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const fs::path out(g.out);
  RunManifest manifest;
  manifest.argv = argv_vector(argc, argv);
  try {
    const json cfg = read_config(g);

    if (*synth) {
      manifest.command = "synth-data";
      const ModelConfig m = resolve_model(g, cfg);
      data::SyntheticSpec spec = resolve_data(g, cfg, data_defaults(m));
      apply(o_num, spec.num_samples, sd.num_samples);
      apply(o_k, spec.num_classes, sd.num_classes);
      apply(o_size, spec.image_size, sd.image_size);
      apply(o_ch, spec.channels, sd.channels);
      apply(o_smin, spec.shapes_min, sd.shapes_min);
      apply(o_smax, spec.shapes_max, sd.shapes_max);
      apply(o_noise, spec.noise_sigma, sd.noise_sigma);
      apply(o_frac, spec.train_fraction, sd.train_fraction);
      spec.validate();
      const fs::path dir = synth_dir.empty() ? out / "data" : fs::path(synth_dir);
      const data::Dataset ds = data::generate_synthetic(spec);
      data::write_folder(ds, dir, spec);
      for (const auto& s : ds.samples) {
        manifest.artifacts.push_back(dir / (s.id + "_img.png"));
        manifest.artifacts.push_back(dir / (s.id + "_mask.png"));
      }
      manifest.artifacts.push_back(dir / "manifest.json");
      manifest.config = {{"data", spec.to_json()}, {"dir", dir.generic_string()}};
      manifest.seeds = {spec.seed};
      std::cout << "wrote " << ds.size() << " samples (" << ds.train_ids.size() << " train / " << ds.test_ids.size()
                << " test) to " << dir.string() << "\n";
    } else if (*trn) {
      manifest.command = "train";
      const ModelConfig m = resolve_model(g, cfg);
      train::TrainConfig t = resolve_train(g, cfg, train::TrainConfig::for_preset(m.preset));
      apply(o_it, t.max_iterations, tf.max_iterations);
      apply(o_lr, t.lr, tf.lr);
      apply(o_bs, t.batch_size, tf.batch_size);
      apply(o_ev, t.eval_every, tf.eval_every);
      apply(o_aug, t.augment, tf.augment);
      if (o_sched->count() > 0) t.schedule = schedule == "poly" ? train::LrSchedule::kPoly : train::LrSchedule::kConstant;
      t.validate();
      data::Dataset ds;
      json data_cfg;
      if (!train_data.empty()) {
        ds = data::load_folder(train_data, m.num_classes);
        data_cfg = {{"folder", train_data}};
      } else {
        data::SyntheticSpec spec = resolve_data(g, cfg, data_defaults(m));
        apply(o_tn, spec.num_samples, train_samples);
        spec.validate();
        ds = data::generate_synthetic(spec);
        data_cfg = {{"synthetic", spec.to_json()}};
      }
      data_cfg["split"] = train_split;
      const data::Dataset train_ds = split_of(ds, train_split);
      const data::Dataset eval_ds = ds.test_split();
      std::cout << "training " << m.preset << " on " << train_ds.size() << " samples for " << t.max_iterations
                << " iterations\n";
      auto progress = [&](const train::LogEntry& e) {
        if (e.iteration % 100 == 0 || e.iteration + 1 == t.max_iterations) {
          std::cout << "iter " << e.iteration << " loss " << fmt("%.4f", e.loss) << " ce " << fmt("%.4f", e.ce)
                    << " dice " << fmt("%.4f", e.dice) << (e.skipped ? " (skipped)" : "") << "\n";
        }
      };
      auto result = train::train(m, t, train_ds, progress, t.eval_every > 0 ? &eval_ds : nullptr);
      const fs::path ckpt = out / "checkpoints" / ckpt_name;
      fs::create_directories(ckpt.parent_path());
      const json run_cfg = {{"model", m.to_json()}, {"train", t.to_json()}, {"data", data_cfg}};
      train::save_checkpoint(*result.model, ckpt, run_cfg);
      const fs::path log_path = fs::path(ckpt).replace_extension(".log.jsonl");
      result.log.write_jsonl(log_path);
      const auto report = train::evaluate(*result.model, train_ds);
      const fs::path md = out / "tables" / "train_metrics.md";
      const fs::path js = out / "tables" / "train_metrics.json";
      write_text(md, report.to_markdown());
      write_text(js, report.to_json().dump(2) + "\n");
      std::cout << "train-set mean Dice " << fmt("%.4f", report.mean_dice) << ", mean HD "
                << fmt("%.3f", report.mean_hd) << " " << report.hd_units << " (" << fmt("%.1f", result.log.wall_seconds)
                << " s)\ncheckpoint " << ckpt.string() << "\n";
      manifest.config = run_cfg;
      manifest.seeds = {t.seed};
      if (data_cfg.contains("synthetic")) manifest.seeds.push_back(data_cfg["synthetic"]["seed"].get<uint64_t>());
      manifest.artifacts = {ckpt, log_path, md, js};
    } else if (*ev) {
      manifest.command = "evaluate";
      const fs::path ckpt = eval_ckpt.empty() ? out / "checkpoints" / "model.ckpt" : fs::path(eval_ckpt);
      if (!fs::exists(ckpt)) throw ValidationError("checkpoint: file not found: " + ckpt.string());
      json meta;
      auto model = train::load_checkpoint(ckpt, &meta);
      const ModelConfig& m = model->config();
      data::Dataset ds;
      json data_cfg;
      if (!eval_data.empty()) {
        ds = data::load_folder(eval_data, m.num_classes);
        data_cfg = {{"folder", eval_data}};
      } else {
        data::SyntheticSpec base = data_defaults(m);
        if (meta.contains("data") && meta["data"].contains("synthetic")) {
          base = data::SyntheticSpec::from_json(meta["data"]["synthetic"], base);
        }
        const data::SyntheticSpec spec = resolve_data(g, cfg, base);
        spec.validate();
        ds = data::generate_synthetic(spec);
        data_cfg = {{"synthetic", spec.to_json()}};
      }
      data_cfg["split"] = eval_split;
      const auto report = train::evaluate(*model, split_of(ds, eval_split));
      const fs::path md = out / "tables" / (eval_stem + ".md");
      const fs::path js = out / "tables" / (eval_stem + ".json");
      write_text(md, report.to_markdown());
      write_text(js, report.to_json().dump(2) + "\n");
      std::cout << report.to_markdown();
      manifest.config = {{"checkpoint", ckpt.generic_string()},
                         {"checkpoint_fnv1a", file_hash(ckpt)},
                         {"model", m.to_json()},
                         {"data", data_cfg}};
      if (data_cfg.contains("synthetic")) manifest.seeds = {data_cfg["synthetic"]["seed"].get<uint64_t>()};
      manifest.artifacts = {md, js};
    } else if (*abl) {
      manifest.command = "ablate";
      const json acfg = section(cfg, "ablation");
      for (const auto& [key, v] : acfg.items()) {
        if (key != "axis" && key != "seeds") throw ValidationError("ablation: unknown key '" + key + "'");
      }
      if (o_axis->count() == 0 && acfg.contains("axis")) axis_name = acfg.at("axis").get<std::string>();
      ablation::AblationSpec spec = ablation::AblationSpec::defaults(ablation::parse_axis(axis_name));
      spec.base = resolve_model(g, cfg);
      train::TrainConfig tbase = spec.train;
      tbase.batch_size = train::TrainConfig::for_preset(spec.base.preset).batch_size;
      spec.train = resolve_train(g, cfg, tbase);
      data::SyntheticSpec dbase = spec.data;
      dbase.num_classes = spec.base.num_classes;
      dbase.image_size = spec.base.input_size;
      dbase.channels = spec.base.in_channels;
      spec.data = resolve_data(g, cfg, dbase);
      if (o_seeds->count() > 0) {
        spec.seeds = seeds;
      } else if (acfg.contains("seeds")) {
        spec.seeds = acfg.at("seeds").get<std::vector<uint64_t>>();
      }
      apply(o_ait, spec.train.max_iterations, abl_iters);
      apply(o_asn, spec.data.num_samples, abl_samples);
      spec.data.validate();
      spec.train.validate();
      const std::string stem = ablation::to_string(spec.axis);
      const std::optional<fs::path> cache =
          no_cache ? std::nullopt : std::optional<fs::path>(out / "cache" / "ablation");
      const auto table =
          ablation::run_ablation(spec, cache, [](const std::string& line) { std::cout << line << std::endl; });
      manifest.artifacts = ablation::emit_report(table, out, stem);
      std::cout << ablation::to_markdown(table);
      manifest.config = spec.to_json();
      manifest.seeds = spec.seeds;
    } else if (*gc) {
      manifest.command = "gradcheck";
      std::printf("%-40s %12s %8s  %s\n", "block", "max_rel_err", "checked", "status");
      bool all_ok = true;
      json rows = json::array();
      gradcheck::run_suite(g.seed, !no_model, [&](const gradcheck::Result& r) {
        const bool ok = r.passed();
        all_ok = all_ok && ok;
        std::printf("%-40s %12.3e %8lld  %s\n", r.name.c_str(), r.max_rel_err, static_cast<long long>(r.checked),
                    ok ? "ok" : "FAIL");
        std::fflush(stdout);
        rows.push_back({{"name", r.name},
                        {"max_rel_err", r.max_rel_err},
                        {"checked", r.checked},
                        {"worst", r.worst},
                        {"seconds", r.seconds},
                        {"passed", ok}});
      });
      const fs::path js = out / "tables" / "gradcheck.json";
      write_text(js, json{{"tolerance", gradcheck::kTolerance}, {"step", gradcheck::kStep}, {"results", rows}}.dump(2) +
                         "\n");
      manifest.config = {{"seed", g.seed}, {"include_model", !no_model}, {"tolerance", gradcheck::kTolerance}};
      manifest.seeds = {g.seed};
      manifest.artifacts = {js};
      manifest.write(out);
      if (!all_ok) throw RuntimeFailure("gradient check exceeded tolerance " + fmt("%.0e", gradcheck::kTolerance));
      return 0;
    } else if (*rep) {
      manifest.command = "report";
      if (!fs::exists(rep_input)) throw ValidationError("input: file not found: " + rep_input);
      std::ifstream f(rep_input);
      json j;
      try {
        j = json::parse(f);
      } catch (const json::parse_error& e) {
        throw ValidationError("input: " + rep_input + " is not valid JSON: " + e.what());
      }
      const std::string stem = rep_stem.empty() ? fs::path(rep_input).stem().string() : rep_stem;
      if (j.contains("rows")) {
        const auto table = ablation::ResultTable::from_json(j);
        manifest.artifacts = ablation::emit_report(table, out, stem);
        std::cout << ablation::to_markdown(table);
      } else if (j.contains("classes")) {
        const auto report = metrics::MetricsReport::from_json(j);
        const fs::path md = out / "tables" / (stem + ".md");
        write_text(md, report.to_markdown());
        manifest.artifacts = {md};
        std::cout << report.to_markdown();
      } else {
        throw ValidationError("input: expected an ablation table (\"rows\") or a metrics report (\"classes\")");
      }
      manifest.config = {{"input", rep_input}, {"input_fnv1a", file_hash(rep_input)}, {"stem", stem}};
    }
    const fs::path mpath = manifest.write(out);
    std::cout << "manifest " << mpath.string() << "\n";
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: invalid config: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeFailure& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}
