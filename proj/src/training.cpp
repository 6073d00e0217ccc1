// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

#include "mipcnet/errors.hpp"
#include "mipcnet/loss.hpp"
#include "mipcnet/rng.hpp"

namespace mipcnet::train {

using nlohmann::json;

TrainConfig TrainConfig::for_preset(const std::string& preset) {
  TrainConfig c;
  c.batch_size = preset == "paper" ? 24 : 4;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) { throw ValidationError(key + ": " + why); };
  if (!(lr >= 0) || !std::isfinite(lr)) fail("lr", "must be finite and >= 0");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must be in [0, 1)");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) fail("weight_decay", "must be finite and >= 0");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (max_iterations < 0) fail("max_iterations", "must be >= 0");
  if (eval_every < 0) fail("eval_every", "must be >= 0");
}

json TrainConfig::to_json() const {
  return json{{"lr", lr},
              {"momentum", momentum},
              {"weight_decay", weight_decay},
              {"batch_size", batch_size},
              {"max_iterations", max_iterations},
              {"seed", seed},
              {"lr_schedule", schedule == LrSchedule::kPoly ? "poly" : "constant"},
              {"eval_every", eval_every},
              {"augment", augment}};
}

TrainConfig TrainConfig::from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "batch_size") c.batch_size = v.get<int64_t>();
      else if (key == "max_iterations") c.max_iterations = v.get<int64_t>();
      else if (key == "seed") c.seed = v.get<uint64_t>();
      else if (key == "eval_every") c.eval_every = v.get<int64_t>();
      else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "lr_schedule") {
        const auto s = v.get<std::string>();
        if (s == "constant") c.schedule = LrSchedule::kConstant;
        else if (s == "poly") c.schedule = LrSchedule::kPoly;
        else throw ValidationError("lr_schedule: expected constant or poly; got '" + s + "'");
      } else {
        throw ValidationError("unknown train config key '" + key + "'");
      }
    } catch (const json::exception&) {
      throw ValidationError(key + ": wrong type (" + v.dump() + ")");
    }
  }
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& cfg, int64_t iteration) {
  if (cfg.schedule == LrSchedule::kConstant || cfg.max_iterations <= 0) return cfg.lr;
  const double frac = std::clamp(static_cast<double>(iteration) / static_cast<double>(cfg.max_iterations), 0.0, 1.0);
  return cfg.lr * std::pow(1.0 - frac, 0.9);
}

template <typename T>
bool sgd_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads, SgdState<T>& state,
              double lr, double momentum, double weight_decay) {
  if (params.size() != grads.size()) throw ValidationError("sgd_step: params and grads differ in count");
  if (state.velocity.empty()) {
    for (const auto* p : params) state.velocity.emplace_back(p->shape());
  }
  if (state.velocity.size() != params.size()) throw ValidationError("sgd_step: optimizer state does not match params");
  for (size_t i = 0; i < params.size(); ++i) {
    if (state.velocity[i].shape() != params[i]->shape() ||
        (grads[i] && !grads[i]->empty() && grads[i]->shape() != params[i]->shape())) {
      throw ValidationError("sgd_step: shape mismatch at parameter " + std::to_string(i));
    }
    if (grads[i] && !grads[i]->empty() && !grads[i]->all_finite()) return false;
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), rate = static_cast<T>(lr);
  for (size_t i = 0; i < params.size(); ++i) {
    T* theta = params[i]->data();
    T* v = state.velocity[i].data();
    const bool has_grad = grads[i] && !grads[i]->empty();
    const T* g = has_grad ? grads[i]->data() : nullptr;
    for (int64_t k = 0, n = params[i]->numel(); k < n; ++k) {
      const T gk = (has_grad ? g[k] : T(0)) + wd * theta[k];
      v[k] = mu * v[k] + gk;
      theta[k] -= rate * v[k];
    }
  }
  return true;
}

template <typename T>
bool sgd_step(ParamStore<T>& store, SgdState<T>& state, double lr, double momentum, double weight_decay) {
  std::vector<Tensor<T>*> params;
  std::vector<const Tensor<T>*> grads;
  for (const auto& [name, var] : store.params()) {
    params.push_back(&var.node()->value);
    grads.push_back(&var.node()->grad);
  }
  return sgd_step(params, grads, state, lr, momentum, weight_decay);
}

template bool sgd_step(const std::vector<Tensor<float>*>&, const std::vector<const Tensor<float>*>&,
                       SgdState<float>&, double, double, double);
template bool sgd_step(const std::vector<Tensor<double>*>&, const std::vector<const Tensor<double>*>&,
                       SgdState<double>&, double, double, double);
template bool sgd_step(ParamStore<float>&, SgdState<float>&, double, double, double);
template bool sgd_step(ParamStore<double>&, SgdState<double>&, double, double, double);

std::string TrainLog::to_jsonl() const {
  std::ostringstream os;
  os << json{{"type", "header"}, {"version", version}, {"config", config}, {"wall_seconds", wall_seconds}}.dump()
     << '\n';
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  for (const auto& e : entries) {
    os << json{{"type", "iteration"}, {"iteration", e.iteration}, {"loss", num(e.loss)}, {"ce", num(e.ce)},
               {"dice", num(e.dice)}, {"lr", e.lr}, {"skipped", e.skipped}}
              .dump()
       << '\n';
  }
  for (const auto& [it, report] : evals) {
    os << json{{"type", "eval"}, {"iteration", it}, {"report", report.to_json()}}.dump() << '\n';
  }
  return os.str();
}

void TrainLog::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << to_jsonl();
}

std::vector<double> TrainLog::window_means(int64_t window) const {
  std::vector<double> out;
  double acc = 0;
  int64_t n = 0;
  for (const auto& e : entries) {
    if (e.skipped || !std::isfinite(e.loss)) continue;
    acc += e.loss;
    if (++n == window) {
      out.push_back(acc / static_cast<double>(window));
      acc = 0;
      n = 0;
    }
  }
  return out;
}

std::pair<Tensor<float>, Tensor<int32_t>> make_batch(const std::vector<const data::Sample*>& samples) {
  if (samples.empty()) throw ValidationError("make_batch: no samples");
  const Shape& is = samples.front()->image.shape();
  const Shape& ls = samples.front()->label.shape();
  const auto b = static_cast<int64_t>(samples.size());
  Tensor<float> images({b, is[0], is[1], is[2]});
  Tensor<int32_t> labels({b, ls[0], ls[1]});
  for (int64_t i = 0; i < b; ++i) {
    const auto* s = samples[static_cast<size_t>(i)];
    if (s->image.shape() != is || s->label.shape() != ls) {
      throw ValidationError("make_batch: sample " + s->id + " differs in shape from " + samples.front()->id);
    }
    std::copy(s->image.values().begin(), s->image.values().end(), images.data() + i * s->image.numel());
    std::copy(s->label.values().begin(), s->label.values().end(), labels.data() + i * s->label.numel());
  }
  return {std::move(images), std::move(labels)};
}

std::vector<data::Sample> prepare(const ModelConfig& cfg, const data::Dataset& ds) {
  if (ds.num_classes != cfg.num_classes) {
    throw ValidationError("dataset has " + std::to_string(ds.num_classes) + " classes but the model expects " +
                          std::to_string(cfg.num_classes));
  }
  std::vector<data::Sample> out;
  out.reserve(ds.samples.size());
  for (const auto& s : ds.samples) {
    data::validate_sample(s, ds.num_classes);
    if (s.image.dim(0) != cfg.in_channels) {
      throw ValidationError("sample " + s.id + " has " + std::to_string(s.image.dim(0)) +
                            " channels but the model expects " + std::to_string(cfg.in_channels));
    }
    out.push_back(data::preprocess(s, cfg.input_size));
  }
  return out;
}

TrainLog train(Model& model, const TrainConfig& cfg, const data::Dataset& ds, const ProgressFn& progress,
               const data::Dataset* eval_ds) {
  cfg.validate();
  if (ds.empty()) throw ValidationError("training dataset is empty");
  const auto prepared = prepare(model.config(), ds);
  const auto n = static_cast<int64_t>(prepared.size());
  if (cfg.batch_size > n) {
    throw ValidationError("batch_size: " + std::to_string(cfg.batch_size) + " exceeds the " + std::to_string(n) +
                          " training samples");
  }
  TrainLog log;
  log.config = {{"model", model.config().to_json()}, {"train", cfg.to_json()}};
  const auto start = std::chrono::steady_clock::now();
  SgdState<float> state;
  std::vector<int64_t> order;
  int64_t epoch = -1, cursor = n;
  int64_t bad_streak = 0;
  const int64_t per_epoch = n / cfg.batch_size;

  for (int64_t it = 0; it < cfg.max_iterations; ++it) {
    if (cursor + cfg.batch_size > per_epoch * cfg.batch_size) {
      ++epoch;
      order.resize(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
      rng.shuffle(order.begin(), order.end());
      cursor = 0;
    }
    std::vector<data::Sample> augmented;
    std::vector<const data::Sample*> batch;
    for (int64_t k = 0; k < cfg.batch_size; ++k) {
      const auto& s = prepared[static_cast<size_t>(order[static_cast<size_t>(cursor + k)])];
      if (cfg.augment) {
        augmented.push_back(data::augment(s, static_cast<uint64_t>(epoch), cfg.seed));
      } else {
        batch.push_back(&s);
      }
    }
    for (const auto& s : augmented) batch.push_back(&s);
    cursor += cfg.batch_size;

    auto [images, labels] = make_batch(batch);
    model.set_training(true);
    model.params().zero_grad();
    const ag::Var<float> x(std::move(images));
    std::optional<loss::LossParts<float>> parts;
    LogEntry e;
    e.iteration = it;
    e.lr = learning_rate(cfg, it);
    e.loss = e.ce = e.dice = std::numeric_limits<double>::quiet_NaN();
    try {
      parts = loss::combined_loss(model(x), labels);
      e.loss = parts->total.value()[0];
      e.ce = parts->ce;
      e.dice = parts->dice;
    } catch (const NonFiniteValue&) {
      // Diverged weights; counted like a non-finite loss below.
    }
    if (std::isfinite(e.loss)) {
      ag::backward(parts->total);
      e.skipped = !sgd_step(model.params(), state, e.lr, cfg.momentum, cfg.weight_decay);
    } else {
      e.skipped = true;
    }
    bad_streak = std::isfinite(e.loss) ? 0 : bad_streak + 1;
    log.entries.push_back(e);
    if (progress) progress(e);
    if (bad_streak >= 10) {
      throw RuntimeFailure("training diverged: loss was not finite for 10 consecutive iterations (last at " +
                           std::to_string(it) + ")");
    }
    if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
      log.evals.emplace_back(it + 1, evaluate(model, eval_ds ? *eval_ds : ds));
    }
  }
  model.params().zero_grad();
  recalibrate_batch_norm(model, prepared, cfg.batch_size);
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const data::Dataset& ds,
                  const ProgressFn& progress, const data::Dataset* eval_ds) {
  model_cfg.validate();
  TrainResult r;
  r.model = std::make_unique<Model>(model_cfg, cfg.seed);
  r.log = train(*r.model, cfg, ds, progress, eval_ds);
  return r;
}

void recalibrate_batch_norm(Model& model, const std::vector<data::Sample>& samples, int64_t batch_size) {
  if (samples.empty() || batch_size < 1) return;
  ag::NoGradGuard guard;
  auto& store = model.params();
  const bool was_training = store.training();
  store.set_training(true);
  int64_t k = 0;
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size), ++k) {
    std::vector<const data::Sample*> batch;
    for (size_t i = start; i < std::min(samples.size(), start + static_cast<size_t>(batch_size)); ++i) {
      batch.push_back(&samples[i]);
    }
    store.set_bn_momentum(1.0f / static_cast<float>(k + 1));
    auto [images, labels] = make_batch(batch);
    model(ag::Var<float>(std::move(images)));
  }
  store.set_bn_momentum(std::nullopt);
  store.set_training(was_training);
}

Tensor<int32_t> predict(Model& model, const data::Sample& s) {
  ag::NoGradGuard guard;
  model.set_training(false);
  const auto [images, labels] = make_batch({&s});
  const ag::Var<float> x(images);
  const auto pred = argmax_labels(model(x).value());
  return pred.reshaped({pred.dim(1), pred.dim(2)});
}

metrics::MetricsReport evaluate(Model& model, const data::Dataset& ds) {
  if (ds.empty()) throw ValidationError("cannot evaluate on an empty dataset");
  auto prepared = prepare(model.config(), ds);
  std::sort(prepared.begin(), prepared.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  const metrics::Spacing spacing = prepared.front().spacing.value_or(metrics::Spacing{});
  metrics::ReportAccumulator acc(ds.num_classes, spacing, ds.class_names);
  const bool was_training = model.params().training();
  for (const auto& s : prepared) acc.add_case(predict(model, s), s.label);
  model.set_training(was_training);
  return acc.finish();
}

namespace {

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw RuntimeFailure("checkpoint truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& is, uint64_t limit) {
  const uint64_t n = get_u64(is);
  if (n > limit) throw RuntimeFailure("checkpoint field length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw RuntimeFailure("checkpoint truncated");
  return s;
}

void put_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  put_str(os, name);
  put_u64(os, t.shape().size());
  for (int64_t d : t.shape()) put_u64(os, static_cast<uint64_t>(d));
  for (float v : t.values()) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                          static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
  }
}

void get_tensor_into(std::istream& is, const std::string& name, Tensor<float>& dst) {
  const uint64_t rank = get_u64(is);
  if (rank > 8) throw RuntimeFailure("checkpoint entry '" + name + "' has rank " + std::to_string(rank));
  Shape shape;
  for (uint64_t i = 0; i < rank; ++i) shape.push_back(static_cast<int64_t>(get_u64(is)));
  if (shape != dst.shape()) {
    throw ValidationError("checkpoint entry '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                          shape_str(dst.shape()));
  }
  std::vector<unsigned char> raw(static_cast<size_t>(dst.numel()) * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw RuntimeFailure("checkpoint truncated in '" + name + "'");
  }
  for (int64_t i = 0; i < dst.numel(); ++i) {
    const unsigned char* b = raw.data() + 4 * i;
    const uint32_t bits = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
    std::memcpy(&dst[i], &bits, 4);
  }
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path, const json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, static_cast<std::streamsize>(std::strlen(kCheckpointMagic)));
  put_str(os, json{{"model", model.config().to_json()}, {"meta", meta.is_null() ? json::object() : meta}}.dump());
  const auto& store = model.params();
  put_u64(os, store.params().size());
  for (const auto& [name, var] : store.params()) put_tensor(os, name, var.value());
  put_u64(os, store.buffers().size());
  for (const auto& [name, t] : store.buffers()) put_tensor(os, name, *t);
  if (!os) throw RuntimeFailure("failed writing checkpoint " + path.string());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path, json* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path.string());
  const size_t ml = std::strlen(kCheckpointMagic);
  std::string magic(ml, '\0');
  if (!is.read(magic.data(), static_cast<std::streamsize>(ml)) || magic != kCheckpointMagic) {
    throw ValidationError(path.string() + " is not a " + std::string(kCheckpointMagic) + " checkpoint");
  }
  json header;
  try {
    header = json::parse(get_str(is, 1u << 24));
  } catch (const json::exception& e) {
    throw RuntimeFailure(std::string("checkpoint header: ") + e.what());
  }
  const ModelConfig cfg = ModelConfig::from_json(header.at("model"));
  if (meta) *meta = header.value("meta", json::object());
  auto model = std::make_unique<Model>(cfg, 0);
  auto& store = model->params();
  const uint64_t np = get_u64(is);
  if (np != store.params().size()) {
    throw RuntimeFailure("checkpoint has " + std::to_string(np) + " parameters, model has " +
                         std::to_string(store.params().size()));
  }
  for (uint64_t i = 0; i < np; ++i) {
    const std::string name = get_str(is, 4096);
    get_tensor_into(is, name, store.param(name).mutable_value());
  }
  const uint64_t nb = get_u64(is);
  if (nb != store.buffers().size()) throw RuntimeFailure("checkpoint buffer count mismatch");
  for (uint64_t i = 0; i < nb; ++i) {
    const std::string name = get_str(is, 4096);
    Tensor<float>* t = store.buffer(name);
    if (!t) throw RuntimeFailure("checkpoint buffer '" + name + "' unknown to the model");
    get_tensor_into(is, name, *t);
  }
  return model;
}

}  // namespace mipcnet::train
