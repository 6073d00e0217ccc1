// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <memory>

#include "json.hpp"
#include "mipcnet/ablation.hpp"
#include "mipcnet/errors.hpp"
#include "mipcnet/gradcheck.hpp"
#include "mipcnet/metrics.hpp"
#include "mipcnet/training.hpp"

namespace py = pybind11;
using namespace mipcnet;
using nlohmann::json;

namespace {

// Configs and results cross the boundary as JSON text; the Python side wraps
// them with json.loads / json.dumps.
json parse(const std::string& s) { return s.empty() ? json::object() : json::parse(s); }

template <typename T>
py::array_t<T> to_numpy(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

template <typename T>
Tensor<T> from_numpy(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  Tensor<T> t(shape);
  std::copy(a.data(), a.data() + t.numel(), t.data());
  return t;
}

metrics::BinaryMask mask_of(const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ValidationError("mask must be 2-D");
  auto m = from_numpy<uint8_t>(a);
  for (auto& v : m.values()) v = v != 0;
  return m;
}

data::Dataset dataset_from_spec(const std::string& spec_json) {
  return data::generate_synthetic(data::SyntheticSpec::from_json(parse(spec_json)));
}

class PyModel {
 public:
  PyModel(const std::string& config_json, uint64_t seed)
      : model_(std::make_unique<train::Model>(ModelConfig::from_json(parse(config_json)), seed)) {}
  explicit PyModel(std::unique_ptr<train::Model> m) : model_(std::move(m)) {}

  py::array_t<float> forward(const py::array_t<float, py::array::c_style | py::array::forcecast>& images) {
    model_->set_training(false);
    ag::NoGradGuard guard;
    return to_numpy(model_->operator()(ag::Var<float>(from_numpy<float>(images))).value());
  }
  py::array_t<int32_t> predict(const py::array_t<float, py::array::c_style | py::array::forcecast>& images) {
    model_->set_training(false);
    ag::NoGradGuard guard;
    return to_numpy(argmax_labels(model_->operator()(ag::Var<float>(from_numpy<float>(images))).value()));
  }
  std::string config() const { return model_->config().to_json().dump(); }
  int64_t parameter_count() const { return model_->parameter_count(); }
  void save(const std::string& path) const { train::save_checkpoint(*model_, path); }
  std::string evaluate(const std::string& spec_json) { return train::evaluate(*model_, dataset_from_spec(spec_json)).to_json().dump(); }

  std::unique_ptr<train::Model> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "mipcnet C++ core";
  m.attr("__version__") = train::kVersion;

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

  m.def("preset_config", [](const std::string& name) { return ModelConfig::from_preset(name).to_json().dump(); });
  m.def("config_hash", [](const std::string& j) { return config_hash(parse(j)); });

  m.def("synthetic_dataset", [](const std::string& spec_json) {
    const auto ds = dataset_from_spec(spec_json);
    py::list out;
    for (const auto& s : ds.samples) out.append(py::make_tuple(s.id, to_numpy(s.image), to_numpy(s.label)));
    return out;
  });

  m.def("overlap_metrics", [](py::array_t<uint8_t> pred, py::array_t<uint8_t> gt) {
    const auto o = metrics::overlap_metrics(metrics::confusion_counts(mask_of(pred), mask_of(gt)));
    return py::dict(py::arg("dice") = o.dice, py::arg("iou") = o.iou, py::arg("vacuous") = o.vacuous);
  });
  m.def(
      "hausdorff",
      [](py::array_t<uint8_t> a, py::array_t<uint8_t> b, double row, double col, double percentile) {
        return metrics::hausdorff(mask_of(a), mask_of(b), {row, col}, percentile).distance;
      },
      py::arg("a"), py::arg("b"), py::arg("row_spacing") = 1.0, py::arg("col_spacing") = 1.0,
      py::arg("percentile") = 100.0);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&, uint64_t>(), py::arg("config_json"), py::arg("seed") = 0)
      .def("forward", &PyModel::forward)
      .def("predict", &PyModel::predict)
      .def("config_json", &PyModel::config)
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def("save", &PyModel::save)
      .def("evaluate_json", &PyModel::evaluate)
      .def_static("load", [](const std::string& path) { return PyModel(train::load_checkpoint(path)); });

  m.def("train", [](const std::string& model_json, const std::string& train_json, const std::string& data_json) {
    const ModelConfig mc = ModelConfig::from_json(parse(model_json));
    const auto tc = train::TrainConfig::from_json(parse(train_json), train::TrainConfig::for_preset(mc.preset));
    py::gil_scoped_release release;
    auto result = train::train(mc, tc, dataset_from_spec(data_json));
    std::vector<double> losses;
    for (const auto& e : result.log.entries) losses.push_back(e.loss);
    py::gil_scoped_acquire acquire;
    return py::make_tuple(PyModel(std::move(result.model)), losses);
  });

  m.def("gradcheck", [](bool include_model, uint64_t seed) {
    py::list out;
    for (const auto& r : gradcheck::run_suite(seed, include_model)) {
      out.append(py::dict(py::arg("name") = r.name, py::arg("max_rel_err") = r.max_rel_err,
                          py::arg("checked") = r.checked, py::arg("passed") = r.passed()));
    }
    return out;
  }, py::arg("include_model") = false, py::arg("seed") = 0);

  m.def("ablation_markdown", [](const std::string& table_json) {
    return ablation::to_markdown(ablation::ResultTable::from_json(parse(table_json)));
  });
}
