// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include "mipcnet/errors.hpp"
#include "mipcnet/ops.hpp"
#include "mipcnet/rng.hpp"

namespace mipcnet::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RawPng {
  int64_t width = 0, height = 0, channels = 0;
  int bit_depth = 8;
  std::vector<uint16_t> px;  // interleaved, row-major
};

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

RawPng read_png(const fs::path& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ValidationError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ValidationError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw RuntimeFailure("libpng initialisation failed");
  }
  RawPng out;
  std::vector<png_bytep> rows;
  std::vector<png_byte> buf;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("corrupt PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.channels = png_get_channels(png, info);
  out.bit_depth = png_get_bit_depth(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * static_cast<size_t>(out.height));
  for (int64_t y = 0; y < out.height; ++y) rows.push_back(buf.data() + static_cast<size_t>(y) * stride);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const size_t n = static_cast<size_t>(out.width * out.height * out.channels);
  out.px.resize(n);
  for (size_t i = 0; i < n; ++i) {
    out.px[i] = out.bit_depth == 16 ? static_cast<uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]) : buf[i];
  }
  return out;
}

void write_png(const fs::path& path, int64_t width, int64_t height, int channels, int bit_depth,
               const std::vector<uint16_t>& px) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw RuntimeFailure("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw RuntimeFailure("libpng initialisation failed");
  }
  const size_t bytes = bit_depth == 16 ? 2 : 1;
  const size_t stride = static_cast<size_t>(width * channels) * bytes;
  std::vector<png_byte> buf(stride * static_cast<size_t>(height));
  for (size_t i = 0; i < px.size(); ++i) {
    if (bytes == 2) {
      buf[2 * i] = static_cast<png_byte>(px[i] >> 8);
      buf[2 * i + 1] = static_cast<png_byte>(px[i] & 0xff);
    } else {
      buf[i] = static_cast<png_byte>(px[i]);
    }
  }
  std::vector<png_bytep> rows;
  for (int64_t y = 0; y < height; ++y) rows.push_back(buf.data() + static_cast<size_t>(y) * stride);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RuntimeFailure("PNG encoding failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

std::string case_id(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case%04lld", static_cast<long long>(i));
  return buf;
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::string>& ids) const {
  const std::set<std::string> want(ids.begin(), ids.end());
  Dataset out;
  out.num_classes = num_classes;
  out.class_names = class_names;
  for (const auto& s : samples) {
    if (want.count(s.id)) out.samples.push_back(s);
  }
  return out;
}

void validate_sample(const Sample& s, int64_t num_classes) {
  if (s.image.rank() != 3) throw ValidationError("sample " + s.id + ": image must be (C, H, W)");
  if (s.label.rank() != 2) throw ValidationError("sample " + s.id + ": label must be (H, W)");
  if (s.image.dim(1) != s.label.dim(0) || s.image.dim(2) != s.label.dim(1)) {
    throw ValidationError("sample " + s.id + ": image " + shape_str(s.image.shape()) + " and label " +
                          shape_str(s.label.shape()) + " differ spatially");
  }
  for (int64_t i = 0; i < s.label.numel(); ++i) {
    if (s.label[i] < 0 || s.label[i] >= num_classes) {
      throw ValidationError("sample " + s.id + ": label value " + std::to_string(s.label[i]) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
  }
  if (!s.image.all_finite()) throw ValidationError("sample " + s.id + ": non-finite image value");
}

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError(key + ": " + why); };
  if (num_samples < 1) fail("num_samples", "must be >= 1");
  if (num_classes < 2 || num_classes > 255) fail("num_classes", "must be in [2, 255]");
  if (image_size < 16) fail("image_size", "must be >= 16 to place shapes");
  if (channels != 1 && channels != 3) fail("channels", "must be 1 or 3");
  if (shapes_min < 1 || shapes_max < shapes_min) fail("shapes_per_class", "need 1 <= min <= max");
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) fail("noise_sigma", "must be finite and >= 0");
  if (!(train_fraction > 0 && train_fraction <= 1)) fail("train_fraction", "must be in (0, 1]");
}

json SyntheticSpec::to_json() const {
  return json{{"num_samples", num_samples},       {"num_classes", num_classes},
              {"image_size", image_size},         {"channels", channels},
              {"shapes_per_class", {shapes_min, shapes_max}},
              {"noise_sigma", noise_sigma},       {"train_fraction", train_fraction},
              {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const json& j) { return from_json(j, SyntheticSpec{}); }

SyntheticSpec SyntheticSpec::from_json(const json& j, SyntheticSpec s) {
  if (!j.is_object()) throw ValidationError("synthetic spec must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "num_samples") s.num_samples = v.get<int64_t>();
      else if (key == "num_classes") s.num_classes = v.get<int64_t>();
      else if (key == "image_size") s.image_size = v.get<int64_t>();
      else if (key == "channels") s.channels = v.get<int64_t>();
      else if (key == "shapes_per_class") {
        s.shapes_min = v.at(0).get<int64_t>();
        s.shapes_max = v.at(1).get<int64_t>();
      } else if (key == "noise_sigma") s.noise_sigma = v.get<double>();
      else if (key == "train_fraction") s.train_fraction = v.get<double>();
      else if (key == "seed") s.seed = v.get<uint64_t>();
      else throw ValidationError("unknown synthetic spec key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

float class_intensity(int64_t k, int64_t num_classes) {
  return quantize(0.1 + 0.8 * static_cast<double>(k) / static_cast<double>(num_classes - 1));
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.class_names = metrics::default_class_names(spec.num_classes);
  const int64_t n = spec.image_size;
  const double size = static_cast<double>(n);
  for (int64_t i = 0; i < spec.num_samples; ++i) {
    Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(i)));
    Sample s;
    s.id = case_id(i);
    s.label = Tensor<int32_t>({n, n});
    for (int32_t k = 1; k < spec.num_classes; ++k) {
      const int64_t count = rng.range(spec.shapes_min, spec.shapes_max);
      for (int64_t e = 0; e < count; ++e) {
        const double ry = rng.uniform(size / 12.0, size / 5.0);
        const double rx = rng.uniform(size / 12.0, size / 5.0);
        const double r = std::max(ry, rx);
        const double cy = rng.uniform(r, size - 1 - r);
        const double cx = rng.uniform(r, size - 1 - r);
        const double theta = rng.uniform(0.0, M_PI);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int64_t y = 0; y < n; ++y) {
          for (int64_t x = 0; x < n; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
            if (u * u + v * v <= 1.0) s.label[y * n + x] = k;
          }
        }
        // The centre pixel always belongs to the shape.
        s.label[std::lround(cy) * n + std::lround(cx)] = k;
      }
    }
    s.image = Tensor<float>({spec.channels, n, n});
    for (int64_t c = 0; c < spec.channels; ++c) {
      for (int64_t p = 0; p < n * n; ++p) {
        double v = class_intensity(s.label[p], spec.num_classes);
        if (c > 0) v = 1.0 - v * (0.5 + 0.25 * static_cast<double>(c));
        if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
        s.image[c * n * n + p] = quantize(v);
      }
    }
    ds.samples.push_back(std::move(s));
  }

  std::vector<std::string> ids;
  for (const auto& s : ds.samples) ids.push_back(s.id);
  Rng split_rng(mix_seed(spec.seed, 0x5b117ull));
  split_rng.shuffle(ids.begin(), ids.end());
  auto n_train = static_cast<size_t>(std::llround(spec.train_fraction * static_cast<double>(ids.size())));
  n_train = std::clamp<size_t>(n_train, 1, ids.size());
  ds.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.test_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  std::sort(ds.train_ids.begin(), ds.train_ids.end());
  std::sort(ds.test_ids.begin(), ds.test_ids.end());
  return ds;
}

json manifest_json(const Dataset& ds, const std::optional<SyntheticSpec>& spec) {
  json ids = json::array();
  json present = json::object();
  for (const auto& s : ds.samples) {
    ids.push_back(s.id);
    std::set<int32_t> cls;
    for (int64_t i = 0; i < s.label.numel(); ++i) {
      if (s.label[i] > 0) cls.insert(s.label[i]);
    }
    present[s.id] = std::vector<int32_t>(cls.begin(), cls.end());
  }
  json j{{"ids", ids},
         {"num_classes", ds.num_classes},
         {"class_names", ds.class_names},
         {"present_classes", present},
         {"split", {{"train", ds.train_ids}, {"test", ds.test_ids}}}};
  if (!ds.samples.empty() && ds.samples.front().spacing) {
    j["spacing"] = {ds.samples.front().spacing->row, ds.samples.front().spacing->col};
  } else {
    j["spacing"] = {1.0, 1.0};
  }
  if (spec) j["synthetic_spec"] = spec->to_json();
  return j;
}

void write_folder(const Dataset& ds, const fs::path& dir, const std::optional<SyntheticSpec>& spec) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RuntimeFailure("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& s : ds.samples) {
    write_png_image(dir / (s.id + "_img.png"), s.image);
    write_png_labels(dir / (s.id + "_mask.png"), s.label);
  }
  std::ofstream f(dir / "manifest.json");
  if (!f) throw RuntimeFailure("cannot write " + (dir / "manifest.json").string());
  f << manifest_json(ds, spec).dump(2) << '\n';
}

Dataset load_folder(const fs::path& dir, int64_t num_classes) {
  if (!fs::is_directory(dir)) throw ValidationError("dataset folder " + dir.string() + " does not exist");
  std::map<std::string, std::pair<bool, bool>> pairs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    auto ends = [&](const std::string& suffix) {
      return name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends("_img.png")) pairs[name.substr(0, name.size() - 8)].first = true;
    else if (ends("_mask.png")) pairs[name.substr(0, name.size() - 9)].second = true;
  }
  Dataset ds;
  json manifest;
  if (fs::exists(dir / "manifest.json")) {
    std::ifstream f(dir / "manifest.json");
    try {
      manifest = json::parse(f);
    } catch (const json::exception& e) {
      throw ValidationError("manifest.json: " + std::string(e.what()));
    }
  }
  for (const auto& [id, have] : pairs) {
    if (!have.first) throw ValidationError("sample '" + id + "' has a mask but no _img.png");
    if (!have.second) throw ValidationError("sample '" + id + "' has an image but no _mask.png");
    Sample s;
    s.id = id;
    s.image = read_png_image(dir / (id + "_img.png"));
    s.label = read_png_labels(dir / (id + "_mask.png"));
    if (manifest.contains("spacing")) {
      const metrics::Spacing sp{manifest["spacing"].at(0).get<double>(), manifest["spacing"].at(1).get<double>()};
      if (sp.row != 1.0 || sp.col != 1.0) s.spacing = sp;
    }
    ds.samples.push_back(std::move(s));
  }
  if (num_classes <= 0 && manifest.contains("num_classes")) num_classes = manifest["num_classes"].get<int64_t>();
  if (num_classes <= 0) {
    int32_t top = 0;
    for (const auto& s : ds.samples) {
      for (int64_t i = 0; i < s.label.numel(); ++i) top = std::max(top, s.label[i]);
    }
    num_classes = std::max<int64_t>(2, top + 1);
  }
  ds.num_classes = num_classes;
  if (manifest.contains("class_names") &&
      static_cast<int64_t>(manifest["class_names"].size()) == num_classes) {
    ds.class_names = manifest["class_names"].get<std::vector<std::string>>();
  } else {
    ds.class_names = metrics::default_class_names(num_classes);
  }
  if (manifest.contains("split")) {
    ds.train_ids = manifest["split"].value("train", std::vector<std::string>{});
    ds.test_ids = manifest["split"].value("test", std::vector<std::string>{});
  }
  for (const auto& s : ds.samples) validate_sample(s, num_classes);
  return ds;
}

Tensor<float> read_png_image(const fs::path& path) {
  const RawPng raw = read_png(path);
  const float scale = raw.bit_depth == 16 ? 65535.0f : 255.0f;
  Tensor<float> img({raw.channels, raw.height, raw.width});
  const int64_t hw = raw.height * raw.width;
  for (int64_t p = 0; p < hw; ++p) {
    for (int64_t c = 0; c < raw.channels; ++c) {
      img[c * hw + p] = static_cast<float>(raw.px[static_cast<size_t>(p * raw.channels + c)]) / scale;
    }
  }
  return img;
}

Tensor<int32_t> read_png_labels(const fs::path& path) {
  const RawPng raw = read_png(path);
  if (raw.channels != 1) throw ValidationError(path.string() + ": masks must be single-channel");
  Tensor<int32_t> labels({raw.height, raw.width});
  for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = raw.px[static_cast<size_t>(i)];
  return labels;
}

void write_png_image(const fs::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ValidationError("write_png_image: expected (1|3, H, W), got " + shape_str(image.shape()));
  }
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2), hw = h * w;
  std::vector<uint16_t> px(static_cast<size_t>(c * hw));
  for (int64_t p = 0; p < hw; ++p) {
    for (int64_t k = 0; k < c; ++k) {
      const double v = std::clamp(static_cast<double>(image[k * hw + p]), 0.0, 1.0);
      px[static_cast<size_t>(p * c + k)] = static_cast<uint16_t>(std::lround(v * 255.0));
    }
  }
  write_png(path, w, h, static_cast<int>(c), 8, px);
}

void write_png_labels(const fs::path& path, const Tensor<int32_t>& labels) {
  if (labels.rank() != 2) throw ValidationError("write_png_labels: expected (H, W)");
  std::vector<uint16_t> px(static_cast<size_t>(labels.numel()));
  int32_t top = 0;
  for (int64_t i = 0; i < labels.numel(); ++i) {
    if (labels[i] < 0 || labels[i] > 65535) throw ValidationError("write_png_labels: label out of range");
    px[static_cast<size_t>(i)] = static_cast<uint16_t>(labels[i]);
    top = std::max(top, labels[i]);
  }
  write_png(path, labels.dim(1), labels.dim(0), 1, top > 255 ? 16 : 8, px);
}

Tensor<int32_t> resize_nearest(const Tensor<int32_t>& labels, int64_t out_h, int64_t out_w) {
  const int64_t h = labels.dim(0), w = labels.dim(1);
  Tensor<int32_t> out({out_h, out_w});
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy = std::min(h - 1, (2 * y + 1) * h / (2 * out_h));
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t sx = std::min(w - 1, (2 * x + 1) * w / (2 * out_w));
      out[y * out_w + x] = labels[sy * w + sx];
    }
  }
  return out;
}

Sample preprocess(const Sample& s, int64_t target_size) {
  if (target_size < 1) throw ValidationError("preprocess: target size must be >= 1");
  if (s.image.rank() != 3) throw ValidationError("sample " + s.id + ": image must be (C, H, W)");
  Sample out;
  out.id = s.id;
  out.spacing = s.spacing;
  const int64_t c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  if (h == target_size && w == target_size) {
    out.image = s.image;
    out.label = s.label;
  } else {
    ag::NoGradGuard guard;
    const ag::Var<float> x(s.image.reshaped({1, c, h, w}));
    out.image = ag::resize_bilinear(x, target_size, target_size).value().reshaped({c, target_size, target_size});
    out.label = resize_nearest(s.label, target_size, target_size);
    if (out.spacing) {
      out.spacing = metrics::Spacing{out.spacing->row * static_cast<double>(h) / static_cast<double>(target_size),
                                     out.spacing->col * static_cast<double>(w) / static_cast<double>(target_size)};
    }
  }
  const auto [lo, hi] = std::minmax_element(out.image.values().begin(), out.image.values().end());
  const float mn = *lo, mx = *hi;
  if (mn == mx) {
    out.image.fill(0.0f);
    out.constant_image = true;
  } else {
    const float range = mx - mn;
    for (int64_t i = 0; i < out.image.numel(); ++i) out.image[i] = ((out.image[i] - mn) / range - 0.5f) / 0.5f;
  }
  return out;
}

AugmentParams augment_params(const std::string& id, uint64_t epoch, uint64_t seed, bool square) {
  Rng rng(mix_seed(mix_seed(fnv1a(id), epoch), seed));
  AugmentParams p;
  p.flip_h = rng.below(2) == 1;
  p.flip_v = rng.below(2) == 1;
  p.quarter_turns = static_cast<int>(rng.below(4));
  if (!square) p.quarter_turns &= 2;
  return p;
}

namespace {

// Source (y, x) for destination (y, x) on an (h, w) plane under p; the output
// plane is (w, h) after an odd number of quarter turns.
template <typename V>
Tensor<V> transform_planes(const Tensor<V>& t, int64_t planes, int64_t h, int64_t w, const AugmentParams& p) {
  const bool swap = p.quarter_turns % 2 == 1;
  const int64_t oh = swap ? w : h, ow = swap ? h : w;
  Shape shape = t.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor<V> out(shape);
  for (int64_t pl = 0; pl < planes; ++pl) {
    const V* src = t.data() + pl * h * w;
    V* dst = out.data() + pl * oh * ow;
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        // Undo the rotation (counter-clockwise turns), then the flips.
        int64_t sy = y, sx = x;
        switch (p.quarter_turns) {
          case 1: sy = x, sx = w - 1 - y; break;
          case 2: sy = h - 1 - y, sx = w - 1 - x; break;
          case 3: sy = h - 1 - x, sx = y; break;
          default: break;
        }
        if (p.flip_v) sy = h - 1 - sy;
        if (p.flip_h) sx = w - 1 - sx;
        dst[y * ow + x] = src[sy * w + sx];
      }
    }
  }
  return out;
}

}  // namespace

Sample apply_augment(const Sample& s, const AugmentParams& p) {
  const int64_t h = s.label.dim(0), w = s.label.dim(1);
  if (p.quarter_turns % 2 == 1 && h != w) throw ValidationError("odd quarter turns need a square sample");
  Sample out = s;
  out.image = transform_planes(s.image, s.image.dim(0), h, w, p);
  out.label = transform_planes(s.label, 1, h, w, p);
  if (out.spacing && p.quarter_turns % 2 == 1) std::swap(out.spacing->row, out.spacing->col);
  return out;
}

Sample augment(const Sample& s, uint64_t epoch, uint64_t seed, bool enabled) {
  if (!enabled) return s;
  return apply_augment(s, augment_params(s.id, epoch, seed, s.label.dim(0) == s.label.dim(1)));
}

}  // namespace mipcnet::data
