// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Bridge between the CNN feature pyramid and the token sequence consumed by
// the attention layers. Tokens are ordered level-major, then d, h, w.

#pragma once

#include <array>
#include <vector>

#include "cotr/tensor.hpp"

namespace cotr {

class LevelLayout {
 public:
  LevelLayout() = default;
  explicit LevelLayout(std::vector<Dims3> dims);

  std::size_t levels() const { return dims_.size(); }
  std::size_t total() const { return total_; }
  const Dims3& dims(std::size_t level) const { return dims_.at(level); }
  const std::vector<Dims3>& all_dims() const { return dims_; }
  std::size_t offset(std::size_t level) const { return offsets_.at(level); }
  std::size_t size(std::size_t level) const { return dims_.at(level).count(); }

  struct Position {
    std::size_t level;
    int d;
    int h;
    int w;
  };
  Position locate(std::size_t token) const;
  std::size_t token(std::size_t level, int d, int h, int w) const;

  /// Layout containing only the selected level.
  LevelLayout select(std::size_t level) const;

  friend bool operator==(const LevelLayout& a, const LevelLayout& b) {
    return a.dims_ == b.dims_;
  }

 private:
  std::vector<Dims3> dims_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
};

template <typename T>
struct TokenSequence {
  Matrix<T> tokens;  // N x C
  LevelLayout layout;

  std::size_t size() const { return tokens.rows(); }
  std::size_t channels() const { return tokens.cols(); }
  void validate() const;
};

/// Normalized (d, h, w) anchor per token, each in [0, 1].
template <typename T>
struct ReferencePoints {
  Matrix<T> coords;  // N x 3

  std::array<T, 3> at(std::size_t token) const {
    return {coords(token, 0), coords(token, 1), coords(token, 2)};
  }
  std::size_t size() const { return coords.rows(); }
};

template <typename T>
TokenSequence<T> flatten_levels(const std::vector<Volume<T>>& levels);

template <typename T>
std::vector<Volume<T>> unflatten(const TokenSequence<T>& seq);

/// Voxel-center anchors: ((d + 0.5) / D_l, (h + 0.5) / H_l, (w + 0.5) / W_l).
template <typename T>
ReferencePoints<T> reference_points(const LevelLayout& layout);

/// Maps a normalized point onto the continuous grid of a level,
/// p * dims - 0.5 per axis. Not clamped; the sampler clamps.
template <typename T>
std::array<T, 3> rescale(const std::array<T, 3>& normalized, const Dims3& dims);

}  // namespace cotr
