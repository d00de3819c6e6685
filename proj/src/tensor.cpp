// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace cotr {

std::string to_string(const Dims3& dims) {
  return "(" + std::to_string(dims.d) + "," + std::to_string(dims.h) + "," +
         std::to_string(dims.w) + ")";
}

template <typename T>
Volume<T>::Volume(int channels, Dims3 dims, T fill) : channels_(channels), dims_(dims) {
  if (channels <= 0 || !dims.positive()) {
    throw DimensionError("volume needs positive channels and dims, got " +
                         std::to_string(channels) + "x" + to_string(dims));
  }
  data_.assign(static_cast<std::size_t>(channels) * dims.count(), fill);
}

template <typename T>
Matrix<T>::Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

template <typename T>
Param<T>::Param(std::vector<std::size_t> shape_, T fill) : shape(std::move(shape_)) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  value.assign(n, fill);
  grad.assign(n, T{0});
}

template <typename T>
void Param<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T{0});
}

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class Volume<float>;
template class Volume<double>;
template class Matrix<float>;
template class Matrix<double>;
template struct Param<float>;
template struct Param<double>;
template bool all_finite<float>(std::span<const float>);
template bool all_finite<double>(std::span<const double>);

}  // namespace cotr
