// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mipcnet/ablation.hpp"
#include "mipcnet/attention.hpp"
#include "mipcnet/data.hpp"
#include "mipcnet/gradcheck.hpp"
#include "mipcnet/loss.hpp"
#include "mipcnet/metrics.hpp"
#include "mipcnet/network.hpp"
#include "mipcnet/training.hpp"

using namespace mipcnet;
namespace fs = std::filesystem;
using ag::Var;

namespace {

// Collects failed checks for one criterion.
struct Check {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

std::string num(double v, const char* f = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

template <typename T = double>
Tensor<T> randn(const Shape& shape, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<T> t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(scale * rng.normal());
  return t;
}

using metrics::BinaryMask;

BinaryMask random_mask(int64_t h, int64_t w, Rng& rng) {
  BinaryMask m({h, w});
  const double density = rng.uniform(0.05, 0.6);
  for (int64_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform() < density ? 1 : 0;
  return m;
}

// Boundary pixels: foreground with a background or out-of-image 8-neighbour.
std::vector<std::pair<int64_t, int64_t>> boundary(const BinaryMask& m) {
  const int64_t h = m.dim(0), w = m.dim(1);
  std::vector<std::pair<int64_t, int64_t>> pts;
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      if (!m[r * w + c]) continue;
      bool edge = false;
      for (int64_t dr = -1; dr <= 1; ++dr) {
        for (int64_t dc = -1; dc <= 1; ++dc) {
          const int64_t rr = r + dr, cc = c + dc;
          edge = edge || rr < 0 || cc < 0 || rr >= h || cc >= w || !m[rr * w + cc];
        }
      }
      if (edge) pts.emplace_back(r, c);
    }
  }
  return pts;
}

double brute_hausdorff(const BinaryMask& a, const BinaryMask& b) {
  const auto pa = boundary(a), pb = boundary(b);
  if (pa.empty() && pb.empty()) return 0;
  if (pa.empty() || pb.empty()) return std::hypot(static_cast<double>(a.dim(0)), static_cast<double>(a.dim(1)));
  double worst = 0;
  for (int pass = 0; pass < 2; ++pass) {
    const auto& from = pass == 0 ? pa : pb;
    const auto& to = pass == 0 ? pb : pa;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dr = static_cast<double>(p.first - q.first), dc = static_cast<double>(p.second - q.second);
        best = std::min(best, dr * dr + dc * dc);
      }
      worst = std::max(worst, best);
    }
  }
  return std::sqrt(worst);
}

Var<float> image_for(const ModelConfig& cfg, int64_t batch, uint64_t seed) {
  return Var<float>(randn<float>({batch, cfg.in_channels, cfg.input_size, cfg.input_size}, seed));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Check gradient_suite() {
  Check c;
  const auto start = std::chrono::steady_clock::now();
  const auto results = gradcheck::run_suite(0, true);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& r : results) c.expect(r.passed(), r.name + " max rel err " + num(r.max_rel_err) + " at " + r.worst);
  for (const char* name : {"pam", "cam", "soft_dice_loss", "combined_loss", "micro_model"}) {
    c.expect(std::any_of(results.begin(), results.end(), [&](const auto& r) { return r.name == name; }),
             std::string("missing check ") + name);
  }
  c.expect(secs < 300, "took " + num(secs) + " s");
  return c;
}

Check hausdorff_oracle() {
  Check c;
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const BinaryMask a = random_mask(16, 16, rng), b = random_mask(16, 16, rng);
    const double got = metrics::hausdorff(a, b).distance, want = brute_hausdorff(a, b);
    c.expect(got == want, "pair " + std::to_string(i) + ": " + num(got, "%.17g") + " vs " + num(want, "%.17g"));
  }
  const BinaryMask empty({16, 16});
  const BinaryMask a = random_mask(16, 16, rng);
  const auto both = metrics::hausdorff(empty, empty);
  c.expect(both.distance == 0 && both.status == metrics::HausdorffResult::Status::kBothEmpty, "both empty");
  const auto one = metrics::hausdorff(a, empty);
  c.expect(one.distance == std::hypot(16.0, 16.0) && one.status == metrics::HausdorffResult::Status::kOneEmpty,
           "one empty");
  c.expect(metrics::hausdorff(a, a).distance == 0, "identical");
  return c;
}

Check metric_identities() {
  Check c;
  Rng rng(7);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    metrics::ConfusionCounts k;
    k.tp = static_cast<int64_t>(rng.below(1000));
    k.fp = static_cast<int64_t>(rng.below(1000));
    k.fn = static_cast<int64_t>(rng.below(1000));
    k.tn = static_cast<int64_t>(rng.below(1000));
    if (k.tp + k.fp + k.fn == 0) k.tp = 1;
    const auto o = metrics::overlap_metrics(k);
    worst = std::max(worst, std::abs(o.dice - 2 * o.iou / (1 + o.iou)));
  }
  c.expect(worst <= 1e-12, "dice/iou identity off by " + num(worst));
  for (int i = 0; i < 100; ++i) {
    const BinaryMask a = random_mask(16, 16, rng), b = random_mask(16, 16, rng);
    const double base = metrics::hausdorff(a, b).distance;
    for (double s : {0.5, 2.0, 3.7}) {
      const double scaled = metrics::hausdorff(a, b, {s, s}).distance;
      c.expect(std::abs(scaled - s * base) <= 1e-9, "spacing " + num(s) + " pair " + std::to_string(i));
    }
    c.expect(metrics::hausdorff(a, b).distance == metrics::hausdorff(b, a).distance, "hd symmetry " + std::to_string(i));
    const auto ab = metrics::overlap_metrics(metrics::confusion_counts(a, b));
    const auto ba = metrics::overlap_metrics(metrics::confusion_counts(b, a));
    c.expect(ab.dice == ba.dice, "dice symmetry " + std::to_string(i));
  }
  return c;
}

Check shape_contracts() {
  Check c;
  {
    const auto cfg = ModelConfig::paper();
    MipcNet<float> net(cfg, 0);
    net.set_training(false);
    ag::NoGradGuard guard;
    const auto t = net.trace(image_for(cfg, 1, 1));
    c.expect(t.encoder.tokens.shape() == Shape{1, 196, 768}, "paper tokens " + shape_str(t.encoder.tokens.shape()));
    c.expect(t.logits.shape() == Shape{1, 9, 224, 224}, "paper logits " + shape_str(t.logits.shape()));
  }
  const auto cfg = ModelConfig::tiny();
  MipcNet<float> net(cfg, 0);
  const auto t = net.trace(image_for(cfg, 2, 2));
  c.expect(t.encoder.tokens.shape() == Shape{2, 16, cfg.transformer.hidden_dim}, "tiny tokens");
  c.expect(t.logits.shape() == Shape{2, cfg.num_classes, 64, 64}, "tiny logits " + shape_str(t.logits.shape()));
  Var<float> x = image_for(cfg, 1, 3);
  for (int stage = 0; stage < 3; ++stage) {
    const Var<float> y = net.encoder.stem[static_cast<size_t>(stage)](x);
    const int64_t want_c = stage == 0 ? cfg.stem_base_width : 2 * x.dim(1);
    c.expect(y.dim(2) * 2 == x.dim(2) && y.dim(3) * 2 == x.dim(3) && y.dim(1) == want_c,
             "stem stage " + std::to_string(stage + 1) + " " + shape_str(y.shape()));
    x = y;
  }
  for (const auto& v : MipcVariant::all()) {
    ParamStore<float> store;
    Rng rng(4);
    MipcBlock<float> block(Scope<float>{&store, &rng, "mipc"}, 32, v);
    c.expect(block(Var<float>(randn<float>({2, 32, 28, 28}, 5)), GateMode::kLearned).shape() == Shape{2, 32, 28, 28},
             "variant " + v.key());
  }
  return c;
}

Check identity_at_init() {
  Check c;
  ParamStore<double> store;
  Rng rng(9);
  PositionAttention<double> pam(Scope<double>{&store, &rng, "pam"}, 8);
  ChannelAttention<double> cam(Scope<double>{&store, &rng, "cam"});
  const Var<double> x(randn({2, 8, 7, 5}, 10));
  c.expect(pam(x).value() == x.value(), "pam with gamma 0 is not the identity");
  c.expect(cam(x).value() == x.value(), "cam with gamma 0 is not the identity");
  for (bool training : {true, false}) {
    store.set_training(training);
    ResidualTail<double> tail(Scope<double>{&store, &rng, training ? "tail_t" : "tail_e"}, 8);
    for (auto* conv : {&tail.conv_a, &tail.conv_b}) {
      auto w = conv->weight;
      w.mutable_value().fill(0);
      if (conv->bias.defined()) {
        auto b = conv->bias;
        b.mutable_value().fill(0);
      }
    }
    const Tensor<double> y = tail(x).value();
    bool relu = y.shape() == x.shape();
    for (int64_t i = 0; relu && i < y.numel(); ++i) relu = y[i] == std::max(0.0, x.value()[i]);
    c.expect(relu, std::string("zeroed residual tail is not relu in ") + (training ? "train" : "eval") + " mode");
  }
  return c;
}

struct Smoke {
  double dice = 0, seconds = 0;
  std::vector<double> windows;
  bool identical = false;
  bool ran = false;
};

Smoke run_smoke() {
  Smoke s;
  data::SyntheticSpec spec;
  spec.num_samples = 8;
  const auto ds = data::generate_synthetic(spec);
  const auto cfg = ModelConfig::tiny();
  train::TrainConfig tc = train::TrainConfig::for_preset("tiny");
  tc.max_iterations = 1000;
  const auto start = std::chrono::steady_clock::now();
  auto a = train::train(cfg, tc, ds);
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  s.dice = train::evaluate(*a.model, ds).mean_dice;
  s.windows = a.log.window_means(100);
  auto b = train::train(cfg, tc, ds);
  s.identical = a.log.entries.size() == b.log.entries.size();
  for (size_t i = 0; s.identical && i < a.log.entries.size(); ++i) {
    s.identical = a.log.entries[i].loss == b.log.entries[i].loss;
  }
  const auto& pa = a.model->params().params();
  const auto& pb = b.model->params().params();
  s.identical = s.identical && pa.size() == pb.size();
  for (size_t i = 0; s.identical && i < pa.size(); ++i) s.identical = pa[i].second.value() == pb[i].second.value();
  const auto& ba = a.model->params().buffers();
  const auto& bb = b.model->params().buffers();
  for (size_t i = 0; s.identical && i < ba.size(); ++i) s.identical = *ba[i].second == *bb[i].second;
  s.ran = true;
  return s;
}

bool strictly_decreasing(const std::vector<double>& v) {
  for (size_t i = 1; i < v.size(); ++i) {
    if (!(v[i] < v[i - 1])) return false;
  }
  return v.size() >= 2;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : " ") + num(x, "%.4f");
  return s;
}

Check overfit_smoke(const Smoke& s) {
  Check c;
  c.expect(s.dice >= 0.95, "train-set Dice " + num(s.dice, "%.4f"));
  c.expect(s.seconds <= 600, "one run took " + num(s.seconds, "%.1f") + " s");
  c.expect(s.identical, "same-seed runs differ");
  return c;
}

Check ablation_harness(const fs::path& out) {
  Check c;
  const auto start = std::chrono::steady_clock::now();
  const fs::path cache = out / "cache" / "ablation";
  for (auto axis : {ablation::Axis::kTable4, ablation::Axis::kTable5, ablation::Axis::kTable6}) {
    auto spec = ablation::AblationSpec::defaults(axis);
    spec.seeds = {0};
    const auto table = ablation::run_ablation(spec, cache, [](const std::string& line) {
      std::cout << "  " << line << std::endl;
    });
    const std::string stem = ablation::to_string(axis);
    for (const auto& r : table.rows) c.expect(r.status == "ok", stem + " " + r.cell + ": " + r.status);
    ablation::emit_report(table, out, stem);
    const std::string md = slurp(out / "tables" / (stem + ".md"));
    const std::string csv = slurp(out / "tables" / (stem + ".csv"));
    const std::string svg = slurp(out / "plots" / (stem + ".svg"));
    c.expect(ablation::parse_markdown_numbers(md).size() == table.rows.size(), stem + " markdown rows");
    c.expect(ablation::parse_csv_numbers(csv) == ablation::parse_markdown_numbers(md), stem + " csv and markdown agree");
    c.expect(svg.rfind("<svg", 0) == 0 && svg.find("</svg>") != std::string::npos, stem + " svg");
    if (axis == ablation::Axis::kTable4) {
      c.expect(table.rows[0].cell == "PC" && table.rows[0].parameters < table.rows[1].parameters,
               "PC parameters " + std::to_string(table.rows[0].parameters) + " vs MIPC " +
                   std::to_string(table.rows[1].parameters));
    }
    if (axis == ablation::Axis::kTable6) {
      const auto cells = spec.cells();
      const auto x = image_for(cells[0].model, 1, 77);
      std::vector<Tensor<float>> outputs;
      for (const auto& cell : cells) {
        MipcNet<float> net(cell.model, 0);
        net.set_training(false);
        ag::NoGradGuard guard;
        outputs.push_back(net(x).value());
      }
      for (size_t i = 0; i < outputs.size(); ++i) {
        for (size_t j = i + 1; j < outputs.size(); ++j) {
          c.expect(!(outputs[i] == outputs[j]), cells[i].name + " and " + cells[j].name + " give the same output");
        }
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.expect(secs <= 45 * 60, "took " + num(secs, "%.0f") + " s");
  return c;
}

Check loss_sanity(const Smoke& s) {
  Check c;
  Rng rng(3);
  for (int64_t k : {2, 4, 9}) {
    Tensor<int32_t> labels({2, 6, 6});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<int32_t>(rng.below(static_cast<uint64_t>(k)));
    const auto parts = loss::combined_loss(Var<double>(Tensor<double>({2, k, 6, 6}, -1.25)), labels);
    c.expect(std::abs(parts.ce - std::log(static_cast<double>(k))) <= 1e-9, "CE at K=" + std::to_string(k));
  }
  for (uint64_t seed = 0; seed < 100; ++seed) {
    Tensor<int32_t> labels({2, 5, 5});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = static_cast<int32_t>(rng.below(3));
    const double scale = 0.1 * static_cast<double>(seed + 1);
    const double v = loss::combined_loss(Var<double>(randn({2, 3, 5, 5}, seed, scale)), labels).total.value()[0];
    c.expect(v >= 0, "negative loss at seed " + std::to_string(seed));
  }
  c.expect(strictly_decreasing(s.windows), "window means " + join(s.windows));
  return c;
}

Check round_trips(const fs::path& out) {
  Check c;
  data::SyntheticSpec spec;
  spec.num_samples = 6;
  spec.image_size = 32;
  spec.seed = 11;
  const auto ds = data::generate_synthetic(spec);
  const fs::path dir = out / "roundtrip" / "data";
  fs::remove_all(dir);
  data::write_folder(ds, dir, spec);
  const auto back = data::load_folder(dir);
  c.expect(back.size() == ds.size(), "dataset size");
  for (size_t i = 0; i < std::min(back.size(), ds.size()); ++i) {
    c.expect(back.samples[i] == ds.samples[i], "sample " + ds.samples[i].id);
  }
  c.expect(back.train_ids == ds.train_ids && back.test_ids == ds.test_ids, "split");

  ModelConfig m = ModelConfig::micro();
  data::SyntheticSpec mspec;
  mspec.num_samples = 4;
  mspec.image_size = m.input_size;
  mspec.num_classes = m.num_classes;
  const auto mds = data::generate_synthetic(mspec);
  train::TrainConfig tc;
  tc.max_iterations = 5;
  tc.batch_size = 2;
  auto trained = train::train(m, tc, mds);
  const fs::path ckpt = out / "roundtrip" / "model.ckpt";
  train::save_checkpoint(*trained.model, ckpt);
  auto loaded = train::load_checkpoint(ckpt);
  c.expect(train::evaluate(*trained.model, mds) == train::evaluate(*loaded, mds), "checkpoint evaluate differs");

  ablation::ResultTable t;
  for (int i = 0; i < 3; ++i) {
    ablation::Row r;
    r.cell = "cell" + std::to_string(i);
    r.dsc_mean = 0.123456 * (i + 1);
    r.dsc_std = 0.01 * i;
    r.hd_mean = 4.5678 * (i + 1);
    r.hd_std = 0.333 * i;
    t.rows.push_back(r);
  }
  const auto md = ablation::parse_markdown_numbers(ablation::to_markdown(t));
  const auto csv = ablation::parse_csv_numbers(ablation::to_csv(t));
  c.expect(md == csv && md.size() == 3, "markdown and csv numbers differ");
  for (size_t i = 0; i < md.size(); ++i) {
    c.expect(std::abs(md[i][0] - 100 * t.rows[i].dsc_mean) <= 0.005 + 1e-12, "dsc rounding row " + std::to_string(i));
    c.expect(std::abs(md[i][2] - t.rows[i].hd_mean) <= 0.005 + 1e-12, "hd rounding row " + std::to_string(i));
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mipcnet acceptance suite"};
  std::string out = "acceptance_out";
  app.add_option("--out", out, "Scratch and report directory")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  const fs::path out_dir(out);
  fs::create_directories(out_dir);

  std::optional<Smoke> smoke;
  auto get_smoke = [&]() -> const Smoke& {
    if (!smoke) smoke = run_smoke();
    return *smoke;
  };

  const std::vector<std::pair<std::string, std::function<Check()>>> criteria{
      {"gradient suite", gradient_suite},
      {"hausdorff oracle", hausdorff_oracle},
      {"metric identities", metric_identities},
      {"shape contracts", shape_contracts},
      {"identity at init", identity_at_init},
      {"overfit smoke", [&] { return overfit_smoke(get_smoke()); }},
      {"ablation harness", [&] { return ablation_harness(out_dir); }},
      {"loss sanity", [&] { return loss_sanity(get_smoke()); }},
      {"round trips", [&] { return round_trips(out_dir); }},
  };

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    Check c;
    try {
      c = criteria[i].second();
    } catch (const std::exception& e) {
      c.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool ok = c.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << " (" << num(secs, "%.1f")
              << " s)";
    if (!ok) {
      std::cout << ": " << c.failures.front();
      if (c.failures.size() > 1) std::cout << " (+" << c.failures.size() - 1 << " more)";
    }
    std::cout << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
