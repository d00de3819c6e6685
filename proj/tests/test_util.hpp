// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "cotr/random.hpp"
#include "cotr/tensor.hpp"

namespace cotr::test_util {

template <typename T>
Volume<T> random_volume(int channels, Dims3 dims, Rng& rng, double scale = 1.0) {
  Volume<T> v(channels, dims);
  rng.fill_normal<T>(v.data(), 0.0, scale);
  return v;
}

template <typename T>
Matrix<T> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix<T> m(rows, cols);
  rng.fill_normal<T>(m.data(), 0.0, scale);
  return m;
}

template <typename T>
Param<T> random_param(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Param<T> p(std::move(shape));
  rng.fill_normal<T>(std::span<T>(p.value), 0.0, scale);
  return p;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cotr::test_util
