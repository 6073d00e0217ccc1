// Copyright (c) The mipcnet authors.
//
// This source code is licensed under the Apache License, Version 2.0
// found in the LICENSE file in the root directory of this source tree.

#include "mipcnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mipcnet/errors.hpp"

namespace mipcnet {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ValidationError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw ValidationError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                          shape_str(shape_));
  }
}

template <typename T>
int64_t Tensor<T>::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ValidationError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<size_t>(axis)];
}

template <typename T>
T& Tensor<T>::at(int64_t b, int64_t c, int64_t h, int64_t w) {
  return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

template <typename T>
const T& Tensor<T>::at(int64_t b, int64_t c, int64_t h, int64_t w) const {
  return data_[static_cast<size_t>(((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ValidationError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  for (int64_t i = 0; i < t.numel(); ++i) {
    if (std::isfinite(t[i])) continue;
    std::ostringstream os;
    os << "non-finite value in " << what << " at (";
    static const char* kAxisNames[] = {"b", "c", "h", "w"};
    int64_t rem = i;
    std::vector<int64_t> idx(t.shape().size());
    for (int a = t.rank() - 1; a >= 0; --a) {
      idx[static_cast<size_t>(a)] = rem % t.shape()[static_cast<size_t>(a)];
      rem /= t.shape()[static_cast<size_t>(a)];
    }
    for (int a = 0; a < t.rank(); ++a) {
      if (a) os << ", ";
      if (t.rank() == 4) os << kAxisNames[a] << '=';
      else os << "axis" << a << '=';
      os << idx[static_cast<size_t>(a)];
    }
    os << ") of shape " << shape_str(t.shape());
    throw NonFiniteValue(os.str());
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<int32_t>;
template class Tensor<uint8_t>;
template void require_finite(const Tensor<float>&, const std::string&);
template void require_finite(const Tensor<double>&, const std::string&);

}  // namespace mipcnet
