// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Full multi-head scaled dot-product self-attention over all N tokens. This
// is the quadratic baseline for the complexity benchmarks and is
// forward-only.

#pragma once

#include "cotr/random.hpp"
#include "cotr/sequence.hpp"

namespace cotr {

template <typename T>
struct VanillaParams {
  int channels = 0;
  int heads = 1;
  Param<T> q_weight, q_bias;
  Param<T> k_weight, k_bias;
  Param<T> v_weight, v_bias;
  Param<T> out_weight, out_bias;

  static VanillaParams zeros(int channels, int heads);
  int head_width() const { return channels / heads; }
  void validate() const;
};

template <typename T>
VanillaParams<T> init_vanilla_params(int channels, int heads, Rng& rng);

/// Rows are processed one query at a time, so peak scratch memory is O(N)
/// even though the work is O(N^2).
template <typename T>
TokenSequence<T> vanilla_forward(const TokenSequence<T>& seq, const VanillaParams<T>& params);

/// The N x N attention matrix of one head (for inspection at small N).
template <typename T>
Matrix<T> vanilla_attention_weights(const TokenSequence<T>& seq, const VanillaParams<T>& params,
                                    int head);

/// Elements a backward-capable implementation would retain: Q, K, V, the
/// per-head attention matrices, the head concat and the input.
std::size_t vanilla_workspace_elements(std::size_t tokens, int channels, int heads);

}  // namespace cotr
