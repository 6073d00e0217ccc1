// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mipcnet/errors.hpp"

namespace mipcnet::metrics {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_mask(const BinaryMask& m, const char* what) {
  if (m.rank() != 2) throw ValidationError(std::string(what) + ": expected an (H, W) mask, got " + shape_str(m.shape()));
  for (int64_t i = 0; i < m.numel(); ++i) {
    if (m[i] > 1) throw ValidationError(std::string(what) + ": mask values must be 0 or 1");
  }
}

void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Squared Euclidean distance transform to the nearest set pixel, with
// anisotropic spacing: exact 1D scan down the columns, then the lower
// envelope of parabolas along the rows.
std::vector<double> squared_edt(const std::vector<uint8_t>& set, int64_t h, int64_t w, Spacing sp) {
  std::vector<double> g(static_cast<size_t>(h * w), kInf);
  for (int64_t x = 0; x < w; ++x) {
    int64_t last = -1;
    for (int64_t y = 0; y < h; ++y) {
      if (set[static_cast<size_t>(y * w + x)]) last = y;
      if (last >= 0) {
        const double d = sp.row * static_cast<double>(y - last);
        g[static_cast<size_t>(y * w + x)] = d * d;
      }
    }
    last = -1;
    for (int64_t y = h - 1; y >= 0; --y) {
      if (set[static_cast<size_t>(y * w + x)]) last = y;
      if (last >= 0) {
        const double d = sp.row * static_cast<double>(last - y);
        double& cell = g[static_cast<size_t>(y * w + x)];
        cell = std::min(cell, d * d);
      }
    }
  }

  std::vector<double> out(static_cast<size_t>(h * w), kInf);
  std::vector<int64_t> v(static_cast<size_t>(w));
  std::vector<double> z(static_cast<size_t>(w) + 1);
  const double s2 = sp.col * sp.col;
  for (int64_t y = 0; y < h; ++y) {
    const double* f = g.data() + y * w;
    int64_t k = -1;
    for (int64_t q = 0; q < w; ++q) {
      if (f[q] == kInf) continue;
      const double fq = f[q] + s2 * static_cast<double>(q * q);
      while (k >= 0) {
        const int64_t p = v[static_cast<size_t>(k)];
        const double fp = f[p] + s2 * static_cast<double>(p * p);
        const double s = (fq - fp) / (2.0 * s2 * static_cast<double>(q - p));
        if (s <= z[static_cast<size_t>(k)]) {
          --k;
        } else {
          ++k;
          v[static_cast<size_t>(k)] = q;
          z[static_cast<size_t>(k)] = s;
          z[static_cast<size_t>(k) + 1] = kInf;
          break;
        }
      }
      if (k < 0) {
        k = 0;
        v[0] = q;
        z[0] = -kInf;
        z[1] = kInf;
      }
    }
    if (k < 0) continue;
    int64_t j = 0;
    for (int64_t x = 0; x < w; ++x) {
      while (z[static_cast<size_t>(j) + 1] < static_cast<double>(x)) ++j;
      const int64_t p = v[static_cast<size_t>(j)];
      const double dx = sp.col * static_cast<double>(x - p);
      out[static_cast<size_t>(y * w + x)] = dx * dx + f[p];
    }
  }
  return out;
}

double percentile_of(std::vector<double> values, double pct) {
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

void fill_means(MetricsReport& r, const std::vector<bool>& use) {
  std::vector<double> d, i, h, a, p, s;
  for (size_t k = 0; k < r.classes.size(); ++k) {
    if (!use[k]) continue;
    const auto& c = r.classes[k];
    d.push_back(c.dice);
    i.push_back(c.iou);
    h.push_back(c.hd);
    a.push_back(c.accuracy);
    p.push_back(c.precision);
    s.push_back(c.specificity);
  }
  r.classes_in_mean = static_cast<int64_t>(d.size());
  if (d.empty()) {
    r.mean_dice = r.mean_iou = r.mean_accuracy = r.mean_precision = r.mean_specificity = 1.0;
    r.mean_hd = 0.0;
    return;
  }
  r.mean_dice = mean_of(d);
  r.mean_iou = mean_of(i);
  r.mean_hd = mean_of(h);
  r.mean_accuracy = mean_of(a);
  r.mean_precision = mean_of(p);
  r.mean_specificity = mean_of(s);
}

// Classes present in the ground truth; failing that, any non-vacuous class.
std::vector<bool> mean_selection(const std::vector<ClassMetrics>& classes) {
  std::vector<bool> use(classes.size());
  bool any = false;
  for (size_t k = 0; k < classes.size(); ++k) any |= (use[k] = classes[k].in_gt);
  if (!any) {
    for (size_t k = 0; k < classes.size(); ++k) use[k] = !classes[k].vacuous;
  }
  return use;
}

std::string fmt(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

BinaryMask binarize(const LabelMap& labels, int32_t cls) {
  BinaryMask m(labels.shape());
  for (int64_t i = 0; i < labels.numel(); ++i) m[i] = labels[i] == cls ? 1 : 0;
  return m;
}

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt) {
  require_mask(pred, "confusion_counts pred");
  require_mask(gt, "confusion_counts gt");
  require_same(pred.shape(), gt.shape(), "confusion_counts");
  ConfusionCounts c;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i], g = gt[i];
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

PixelMetrics pixel_metrics(const ConfusionCounts& c) {
  PixelMetrics m;
  m.accuracy = c.total() > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total()) : 1.0;
  if (c.tp + c.fp == 0) {
    m.precision = 1.0;
    m.precision_vacuous = true;
  } else {
    m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  }
  if (c.tn + c.fp == 0) {
    m.specificity = 1.0;
    m.specificity_vacuous = true;
  } else {
    m.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  }
  return m;
}

OverlapMetrics overlap_metrics(const ConfusionCounts& c) {
  OverlapMetrics m;
  const int64_t union_ = c.tp + c.fp + c.fn;
  if (union_ == 0) {
    m.iou = m.dice = 1.0;
    m.vacuous = true;
    return m;
  }
  m.iou = static_cast<double>(c.tp) / static_cast<double>(union_);
  m.dice = static_cast<double>(2 * c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
  return m;
}

std::vector<std::pair<int64_t, int64_t>> boundary_points(const BinaryMask& mask) {
  require_mask(mask, "boundary_points");
  const int64_t h = mask.dim(0), w = mask.dim(1);
  std::vector<std::pair<int64_t, int64_t>> pts;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      if (!mask[y * w + x]) continue;
      bool edge = false;
      for (int64_t dy = -1; dy <= 1 && !edge; ++dy) {
        for (int64_t dx = -1; dx <= 1 && !edge; ++dx) {
          const int64_t ny = y + dy, nx = x + dx;
          edge = ny < 0 || ny >= h || nx < 0 || nx >= w || !mask[ny * w + nx];
        }
      }
      if (edge) pts.emplace_back(y, x);
    }
  }
  return pts;
}

HausdorffResult hausdorff(const BinaryMask& a, const BinaryMask& b, Spacing spacing, double percentile) {
  require_mask(a, "hausdorff a");
  require_mask(b, "hausdorff b");
  require_same(a.shape(), b.shape(), "hausdorff");
  if (!(spacing.row > 0) || !(spacing.col > 0) || !std::isfinite(spacing.row) || !std::isfinite(spacing.col)) {
    throw ValidationError("hausdorff: spacing must be positive and finite");
  }
  if (!(percentile > 0) || percentile > 100) throw ValidationError("hausdorff: percentile must be in (0, 100]");
  const int64_t h = a.dim(0), w = a.dim(1);
  const auto pa = boundary_points(a);
  const auto pb = boundary_points(b);
  HausdorffResult r;
  if (pa.empty() && pb.empty()) {
    r.status = HausdorffResult::Status::kBothEmpty;
    return r;
  }
  if (pa.empty() || pb.empty()) {
    const double dy = static_cast<double>(h) * spacing.row, dx = static_cast<double>(w) * spacing.col;
    r.distance = std::sqrt(dy * dy + dx * dx);
    r.status = HausdorffResult::Status::kOneEmpty;
    return r;
  }
  auto as_set = [&](const std::vector<std::pair<int64_t, int64_t>>& pts) {
    std::vector<uint8_t> s(static_cast<size_t>(h * w), 0);
    for (const auto& [y, x] : pts) s[static_cast<size_t>(y * w + x)] = 1;
    return s;
  };
  const auto dt_a = squared_edt(as_set(pa), h, w, spacing);
  const auto dt_b = squared_edt(as_set(pb), h, w, spacing);
  std::vector<double> pooled;
  pooled.reserve(pa.size() + pb.size());
  for (const auto& [y, x] : pa) pooled.push_back(dt_b[static_cast<size_t>(y * w + x)]);
  for (const auto& [y, x] : pb) pooled.push_back(dt_a[static_cast<size_t>(y * w + x)]);
  if (percentile >= 100) {
    r.distance = std::sqrt(*std::max_element(pooled.begin(), pooled.end()));
  } else {
    for (double& d : pooled) d = std::sqrt(d);
    r.distance = percentile_of(std::move(pooled), percentile);
  }
  return r;
}

std::vector<std::string> default_class_names(int64_t num_classes) {
  std::vector<std::string> names;
  for (int64_t k = 0; k < num_classes; ++k) names.push_back(k == 0 ? "background" : "class" + std::to_string(k));
  return names;
}

MetricsReport per_class_report(const LabelMap& pred, const LabelMap& gt, int64_t num_classes, Spacing spacing,
                               const std::vector<std::string>& class_names) {
  if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
  if (pred.rank() != 2) throw ValidationError("per_class_report: expected (H, W) label maps, got " + shape_str(pred.shape()));
  require_same(pred.shape(), gt.shape(), "per_class_report");
  for (const LabelMap* m : {&pred, &gt}) {
    for (int64_t i = 0; i < m->numel(); ++i) {
      if ((*m)[i] < 0 || (*m)[i] >= num_classes) {
        throw ValidationError("per_class_report: label " + std::to_string((*m)[i]) + " outside [0, " +
                              std::to_string(num_classes) + ")");
      }
    }
  }
  const auto names = class_names.empty() ? default_class_names(num_classes) : class_names;
  if (static_cast<int64_t>(names.size()) != num_classes) {
    throw ValidationError("per_class_report: " + std::to_string(names.size()) + " class names for " +
                          std::to_string(num_classes) + " classes");
  }
  MetricsReport r;
  r.case_count = 1;
  r.spacing = spacing;
  r.hd_units = spacing.row == 1.0 && spacing.col == 1.0 ? "px" : "mm";
  for (int32_t k = 1; k < num_classes; ++k) {
    const BinaryMask p = binarize(pred, k), g = binarize(gt, k);
    const auto counts = confusion_counts(p, g);
    const auto px = pixel_metrics(counts);
    const auto ov = overlap_metrics(counts);
    const auto hd = hausdorff(p, g, spacing);
    ClassMetrics c;
    c.cls = k;
    c.name = names[static_cast<size_t>(k)];
    c.dice = ov.dice;
    c.iou = ov.iou;
    c.hd = hd.distance;
    c.accuracy = px.accuracy;
    c.precision = px.precision;
    c.specificity = px.specificity;
    c.in_gt = counts.tp + counts.fn > 0;
    c.in_pred = counts.tp + counts.fp > 0;
    c.vacuous = ov.vacuous;
    c.hd_penalty = hd.status == HausdorffResult::Status::kOneEmpty;
    c.cases = c.vacuous ? 0 : 1;
    r.classes.push_back(std::move(c));
  }
  fill_means(r, mean_selection(r.classes));
  return r;
}

ReportAccumulator::ReportAccumulator(int64_t num_classes, Spacing spacing, std::vector<std::string> class_names)
    : num_classes_(num_classes), spacing_(spacing), names_(std::move(class_names)) {
  if (names_.empty()) names_ = default_class_names(num_classes);
}

void ReportAccumulator::add_case(const LabelMap& pred, const LabelMap& gt) {
  cases_.push_back(per_class_report(pred, gt, num_classes_, spacing_, names_));
}

MetricsReport ReportAccumulator::finish() const {
  MetricsReport r;
  r.case_count = static_cast<int64_t>(cases_.size());
  r.spacing = spacing_;
  r.hd_units = spacing_.row == 1.0 && spacing_.col == 1.0 ? "px" : "mm";
  for (int32_t k = 1; k < num_classes_; ++k) {
    ClassMetrics c;
    c.cls = k;
    c.name = names_[static_cast<size_t>(k)];
    // Average over cases whose ground truth holds the class; if none do,
    // over the cases where the class was predicted.
    std::vector<const ClassMetrics*> pick;
    for (const auto& cr : cases_) {
      const auto& cm = cr.classes[static_cast<size_t>(k - 1)];
      c.in_gt |= cm.in_gt;
      c.in_pred |= cm.in_pred;
      if (cm.in_gt) pick.push_back(&cm);
    }
    if (pick.empty()) {
      for (const auto& cr : cases_) {
        const auto& cm = cr.classes[static_cast<size_t>(k - 1)];
        if (!cm.vacuous) pick.push_back(&cm);
      }
    }
    c.vacuous = pick.empty();
    c.cases = static_cast<int64_t>(pick.size());
    if (pick.empty()) {
      c.dice = c.iou = c.accuracy = c.precision = c.specificity = 1.0;
    } else {
      std::vector<double> d, i, h, a, p, s;
      for (const auto* cm : pick) {
        d.push_back(cm->dice);
        i.push_back(cm->iou);
        h.push_back(cm->hd);
        a.push_back(cm->accuracy);
        p.push_back(cm->precision);
        s.push_back(cm->specificity);
        c.hd_penalty |= cm->hd_penalty;
      }
      c.dice = mean_of(d);
      c.iou = mean_of(i);
      c.hd = mean_of(h);
      c.accuracy = mean_of(a);
      c.precision = mean_of(p);
      c.specificity = mean_of(s);
    }
    r.classes.push_back(std::move(c));
  }
  fill_means(r, mean_selection(r.classes));
  return r;
}

json MetricsReport::to_json() const {
  json cls = json::array();
  for (const auto& c : classes) {
    cls.push_back({{"class", c.cls},
                   {"name", c.name},
                   {"dice", c.dice},
                   {"iou", c.iou},
                   {"hd", c.hd},
                   {"accuracy", c.accuracy},
                   {"precision", c.precision},
                   {"specificity", c.specificity},
                   {"in_gt", c.in_gt},
                   {"in_pred", c.in_pred},
                   {"vacuous", c.vacuous},
                   {"hd_penalty", c.hd_penalty},
                   {"cases", c.cases}});
  }
  return json{{"classes", cls},
              {"mean",
               {{"dice", mean_dice},
                {"iou", mean_iou},
                {"hd", mean_hd},
                {"accuracy", mean_accuracy},
                {"precision", mean_precision},
                {"specificity", mean_specificity}}},
              {"classes_in_mean", classes_in_mean},
              {"case_count", case_count},
              {"spacing", {spacing.row, spacing.col}},
              {"hd_units", hd_units}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  try {
    MetricsReport r;
    for (const auto& c : j.at("classes")) {
      ClassMetrics m;
      m.cls = c.at("class").get<int32_t>();
      m.name = c.at("name").get<std::string>();
      m.dice = c.at("dice").get<double>();
      m.iou = c.at("iou").get<double>();
      m.hd = c.at("hd").get<double>();
      m.accuracy = c.at("accuracy").get<double>();
      m.precision = c.at("precision").get<double>();
      m.specificity = c.at("specificity").get<double>();
      m.in_gt = c.at("in_gt").get<bool>();
      m.in_pred = c.at("in_pred").get<bool>();
      m.vacuous = c.at("vacuous").get<bool>();
      m.hd_penalty = c.at("hd_penalty").get<bool>();
      m.cases = c.at("cases").get<int64_t>();
      r.classes.push_back(std::move(m));
    }
    const auto& m = j.at("mean");
    r.mean_dice = m.at("dice").get<double>();
    r.mean_iou = m.at("iou").get<double>();
    r.mean_hd = m.at("hd").get<double>();
    r.mean_accuracy = m.at("accuracy").get<double>();
    r.mean_precision = m.at("precision").get<double>();
    r.mean_specificity = m.at("specificity").get<double>();
    r.classes_in_mean = j.at("classes_in_mean").get<int64_t>();
    r.case_count = j.at("case_count").get<int64_t>();
    r.spacing = {j.at("spacing").at(0).get<double>(), j.at("spacing").at(1).get<double>()};
    r.hd_units = j.at("hd_units").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("metrics report: ") + e.what());
  }
}

std::string MetricsReport::to_markdown() const {
  std::ostringstream os;
  os << "| Cases | DSC (%) | HD (" << hd_units << ") |";
  for (const auto& c : classes) os << ' ' << c.name << " |";
  os << "\n|---|---|---|";
  for (size_t i = 0; i < classes.size(); ++i) os << "---|";
  os << "\n| " << case_count << " | " << fmt(100.0 * mean_dice, 2) << " | " << fmt(mean_hd, 2) << " |";
  for (const auto& c : classes) os << ' ' << (c.vacuous ? "n/a" : fmt(100.0 * c.dice, 2)) << " |";
  os << '\n';
  return os.str();
}

}  // namespace mipcnet::metrics
