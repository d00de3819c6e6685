// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/sequence.hpp"

#include <algorithm>
#include <iostream>

namespace cotr {

LevelLayout::LevelLayout(std::vector<Dims3> dims) : dims_(std::move(dims)) {
  if (dims_.empty()) throw DimensionError("layout needs at least one level");
  offsets_.reserve(dims_.size());
  for (const auto& d : dims_) {
    if (!d.positive()) throw DimensionError("layout level dims must be positive: " + to_string(d));
    offsets_.push_back(total_);
    total_ += d.count();
  }
}

LevelLayout::Position LevelLayout::locate(std::size_t token) const {
  if (token >= total_) throw IndexError("token " + std::to_string(token) + " out of range");
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), token);
  const auto level = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  const Dims3& d = dims_[level];
  std::size_t local = token - offsets_[level];
  const int w = static_cast<int>(local % d.w);
  local /= d.w;
  const int h = static_cast<int>(local % d.h);
  const int z = static_cast<int>(local / d.h);
  return {level, z, h, w};
}

std::size_t LevelLayout::token(std::size_t level, int d, int h, int w) const {
  const Dims3& g = dims_.at(level);
  return offsets_[level] + (static_cast<std::size_t>(d) * g.h + h) * g.w + w;
}

LevelLayout LevelLayout::select(std::size_t level) const { return LevelLayout({dims_.at(level)}); }

template <typename T>
void TokenSequence<T>::validate() const {
  if (tokens.rows() != layout.total()) {
    throw DimensionError("token sequence has " + std::to_string(tokens.rows()) +
                         " rows but layout covers " + std::to_string(layout.total()));
  }
}

template <typename T>
TokenSequence<T> flatten_levels(const std::vector<Volume<T>>& levels) {
  if (levels.empty()) throw DimensionError("flatten_levels: no levels");
  const int c = levels.front().channels();
  std::vector<Dims3> dims;
  for (const auto& v : levels) {
    if (v.channels() != c) {
      throw DimensionError("flatten_levels: channel mismatch " + std::to_string(v.channels()) +
                           " vs " + std::to_string(c));
    }
    dims.push_back(v.dims());
  }
  TokenSequence<T> seq{Matrix<T>(), LevelLayout(std::move(dims))};
  seq.tokens = Matrix<T>(seq.layout.total(), static_cast<std::size_t>(c));
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& v = levels[l];
    const std::size_t base = seq.layout.offset(l);
    const std::size_t n = v.spatial();
    for (int ch = 0; ch < c; ++ch) {
      auto src = v.channel(ch);
      for (std::size_t i = 0; i < n; ++i) seq.tokens(base + i, ch) = src[i];
    }
  }
  return seq;
}

template <typename T>
std::vector<Volume<T>> unflatten(const TokenSequence<T>& seq) {
  seq.validate();
  const int c = static_cast<int>(seq.channels());
  std::vector<Volume<T>> levels;
  levels.reserve(seq.layout.levels());
  for (std::size_t l = 0; l < seq.layout.levels(); ++l) {
    Volume<T> v(c, seq.layout.dims(l));
    const std::size_t base = seq.layout.offset(l);
    const std::size_t n = v.spatial();
    for (int ch = 0; ch < c; ++ch) {
      auto dst = v.channel(ch);
      for (std::size_t i = 0; i < n; ++i) dst[i] = seq.tokens(base + i, ch);
    }
    levels.push_back(std::move(v));
  }
  return levels;
}

template <typename T>
ReferencePoints<T> reference_points(const LevelLayout& layout) {
  ReferencePoints<T> refs{Matrix<T>(layout.total(), 3)};
  for (std::size_t l = 0; l < layout.levels(); ++l) {
    const Dims3 g = layout.dims(l);
    std::size_t t = layout.offset(l);
    for (int d = 0; d < g.d; ++d) {
      for (int h = 0; h < g.h; ++h) {
        for (int w = 0; w < g.w; ++w, ++t) {
          refs.coords(t, 0) = (static_cast<T>(d) + T(0.5)) / static_cast<T>(g.d);
          refs.coords(t, 1) = (static_cast<T>(h) + T(0.5)) / static_cast<T>(g.h);
          refs.coords(t, 2) = (static_cast<T>(w) + T(0.5)) / static_cast<T>(g.w);
        }
      }
    }
  }
  return refs;
}

template <typename T>
std::array<T, 3> rescale(const std::array<T, 3>& p, const Dims3& dims) {
#ifndef NDEBUG
  for (T v : p) {
    if (v < T{0} || v > T{1}) {
      std::cerr << "warning: rescale input " << v << " outside [0,1]; the sampler will clamp\n";
    }
  }
#endif
  return {p[0] * static_cast<T>(dims.d) - T(0.5), p[1] * static_cast<T>(dims.h) - T(0.5),
          p[2] * static_cast<T>(dims.w) - T(0.5)};
}

#define COTR_INSTANTIATE_SEQ(T)                                                     \
  template struct TokenSequence<T>;                                                 \
  template TokenSequence<T> flatten_levels(const std::vector<Volume<T>>&);          \
  template std::vector<Volume<T>> unflatten(const TokenSequence<T>&);               \
  template ReferencePoints<T> reference_points(const LevelLayout&);                 \
  template std::array<T, 3> rescale(const std::array<T, 3>&, const Dims3&);

COTR_INSTANTIATE_SEQ(float)
COTR_INSTANTIATE_SEQ(double)

}  // namespace cotr
