// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cotr/error.hpp"

namespace cotr {

/// Spatial extent (depth, height, width). Also used for kernel, stride and
/// padding triples.
struct Dims3 {
  int d = 1;
  int h = 1;
  int w = 1;

  constexpr std::size_t count() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  constexpr bool positive() const { return d > 0 && h > 0 && w > 0; }
  friend constexpr bool operator==(const Dims3&, const Dims3&) = default;
};

std::string to_string(const Dims3& dims);

/// Dense channels x D x H x W volume, row-major in (c, d, h, w).
template <typename T>
class Volume {
 public:
  Volume() = default;
  Volume(int channels, Dims3 dims, T fill = T{0});

  int channels() const { return channels_; }
  Dims3 dims() const { return dims_; }
  std::size_t spatial() const { return dims_.count(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int c, int d, int h, int w) const {
    return ((static_cast<std::size_t>(c) * dims_.d + d) * dims_.h + h) * dims_.w + w;
  }
  T& at(int c, int d, int h, int w) { return data_[index(c, d, h, w)]; }
  const T& at(int c, int d, int h, int w) const { return data_[index(c, d, h, w)]; }

  std::span<T> channel(int c) { return {data_.data() + c * spatial(), spatial()}; }
  std::span<const T> channel(int c) const { return {data_.data() + c * spatial(), spatial()}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool same_shape(const Volume& other) const {
    return channels_ == other.channels_ && dims_ == other.dims_;
  }

 private:
  int channels_ = 0;
  Dims3 dims_{0, 0, 0};
  std::vector<T> data_;
};

/// Row-major rows x cols matrix.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// A learnable tensor together with its gradient accumulator. Backward passes
/// add into `grad`; call zero_grad() between steps.
template <typename T>
struct Param {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Param() = default;
  explicit Param(std::vector<std::size_t> shape_, T fill = T{0});

  std::size_t size() const { return value.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? 1 : value.size() / shape.front(); }
  void zero_grad();
};

/// Precision conversion between volumes.
template <typename To, typename From>
Volume<To> cast_volume(const Volume<From>& v) {
  Volume<To> out(v.channels(), v.dims());
  auto src = v.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<To>(src[i]);
  return out;
}

template <typename To, typename From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<To>(m.data()[i]);
  return out;
}

template <typename T>
bool all_finite(std::span<const T> values);

}  // namespace cotr
