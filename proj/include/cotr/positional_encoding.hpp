// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// 3D sinusoidal positional encoding. Each axis gets C/3 channels of
// interleaved (sin, cos) pairs at frequencies 1 / 10000^(2k / (C/3)); the
// per-token row is [PE_D(d), PE_H(h), PE_W(w)].

#pragma once

#include <utility>
#include <vector>

#include "cotr/sequence.hpp"

namespace cotr {

/// (sin(pos * f_k), cos(pos * f_k)) with f_k = 1 / 10000^(2k / (channels / 3)).
/// Requires channels divisible by 6 and 0 <= 2k + 1 < channels / 3.
std::pair<double, double> sinusoid_1d(int pos, int k, int channels);

template <typename T>
struct PositionalEncoding {
  std::vector<Matrix<T>> levels;  // one N_l x C table per level
  int channels = 0;
};

/// N x C table for a single grid.
template <typename T>
Matrix<T> build_pe_table(const Dims3& dims, int channels);

template <typename T>
PositionalEncoding<T> build_pe(const LevelLayout& layout, int channels);

/// Elementwise sum; the gradient w.r.t. the sequence is the identity.
template <typename T>
TokenSequence<T> add_pe(const TokenSequence<T>& seq, const PositionalEncoding<T>& pe);

}  // namespace cotr
