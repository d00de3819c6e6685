// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/vanilla_attention.hpp"

#include <cmath>
#include <string>

#include "cotr/ops.hpp"

namespace cotr {
namespace {

// Head-major transpose of the key matrix: kt[i][c][j] = k(j, i * ch + c).
template <typename T>
std::vector<T> transpose_heads(const Matrix<T>& k, int heads, int ch) {
  const std::size_t n = k.rows();
  std::vector<T> kt(k.size());
  for (std::size_t j = 0; j < n; ++j) {
    for (int i = 0; i < heads; ++i) {
      for (int c = 0; c < ch; ++c) {
        kt[(static_cast<std::size_t>(i) * ch + c) * n + j] = k(j, i * ch + c);
      }
    }
  }
  return kt;
}

// Softmax-normalized scores of query q against all keys for one head.
template <typename T>
void score_row(const Matrix<T>& q, const std::vector<T>& kt, std::size_t query, int head, int ch,
               T scale, std::span<T> row) {
  const std::size_t n = row.size();
  std::fill(row.begin(), row.end(), T{0});
  for (int c = 0; c < ch; ++c) {
    const T a = q(query, head * ch + c) * scale;
    const T* krow = kt.data() + (static_cast<std::size_t>(head) * ch + c) * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += a * krow[j];
  }
  softmax_inplace<T>(row);
}

}  // namespace

template <typename T>
VanillaParams<T> VanillaParams<T>::zeros(int channels, int heads) {
  if (channels <= 0 || heads <= 0 || channels % heads != 0) {
    throw ConfigError("vanilla attention: channels must be a positive multiple of heads");
  }
  VanillaParams<T> p;
  p.channels = channels;
  p.heads = heads;
  const auto c = static_cast<std::size_t>(channels);
  for (auto* w : {&p.q_weight, &p.k_weight, &p.v_weight, &p.out_weight}) *w = Param<T>({c, c});
  for (auto* b : {&p.q_bias, &p.k_bias, &p.v_bias, &p.out_bias}) *b = Param<T>({c});
  return p;
}

template <typename T>
void VanillaParams<T>::validate() const {
  if (channels <= 0 || heads <= 0 || channels % heads != 0) {
    throw ConfigError("vanilla attention: channels must be a positive multiple of heads");
  }
  const auto c = static_cast<std::size_t>(channels);
  for (const auto* w : {&q_weight, &k_weight, &v_weight, &out_weight}) {
    if (w->size() != c * c) throw DimensionError("vanilla attention: weight shape");
  }
  for (const auto* b : {&q_bias, &k_bias, &v_bias, &out_bias}) {
    if (b->size() != c) throw DimensionError("vanilla attention: bias shape");
  }
}

template <typename T>
VanillaParams<T> init_vanilla_params(int channels, int heads, Rng& rng) {
  auto p = VanillaParams<T>::zeros(channels, heads);
  const double bound = std::sqrt(6.0 / (2.0 * channels));
  for (auto* w : {&p.q_weight, &p.k_weight, &p.v_weight, &p.out_weight}) {
    rng.fill_uniform<T>(w->value, -bound, bound);
  }
  return p;
}

template <typename T>
TokenSequence<T> vanilla_forward(const TokenSequence<T>& seq, const VanillaParams<T>& params) {
  params.validate();
  seq.validate();
  if (seq.channels() != static_cast<std::size_t>(params.channels)) {
    throw DimensionError("vanilla attention: sequence width mismatch");
  }
  const std::size_t n = seq.size();
  const int ch = params.head_width();
  const T scale = T{1} / std::sqrt(static_cast<T>(ch));
  const Matrix<T> q = linear(seq.tokens, params.q_weight, params.q_bias);
  const Matrix<T> k = linear(seq.tokens, params.k_weight, params.k_bias);
  const Matrix<T> v = linear(seq.tokens, params.v_weight, params.v_bias);
  const auto kt = transpose_heads(k, params.heads, ch);

  Matrix<T> heads(n, static_cast<std::size_t>(params.channels));
  std::vector<T> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int h = 0; h < params.heads; ++h) {
      score_row<T>(q, kt, i, h, ch, scale, row);
      T* out = heads.row(i).data() + static_cast<std::size_t>(h) * ch;
      for (std::size_t j = 0; j < n; ++j) {
        const T a = row[j];
        const T* vr = v.row(j).data() + static_cast<std::size_t>(h) * ch;
        for (int c = 0; c < ch; ++c) out[c] += a * vr[c];
      }
    }
  }
  return {linear(heads, params.out_weight, params.out_bias), seq.layout};
}

template <typename T>
Matrix<T> vanilla_attention_weights(const TokenSequence<T>& seq, const VanillaParams<T>& params,
                                    int head) {
  params.validate();
  seq.validate();
  if (head < 0 || head >= params.heads) throw IndexError("vanilla attention: head out of range");
  const std::size_t n = seq.size();
  const int ch = params.head_width();
  const T scale = T{1} / std::sqrt(static_cast<T>(ch));
  const Matrix<T> q = linear(seq.tokens, params.q_weight, params.q_bias);
  const Matrix<T> k = linear(seq.tokens, params.k_weight, params.k_bias);
  const auto kt = transpose_heads(k, params.heads, ch);
  Matrix<T> weights(n, n);
  for (std::size_t i = 0; i < n; ++i) score_row<T>(q, kt, i, head, ch, scale, weights.row(i));
  return weights;
}

std::size_t vanilla_workspace_elements(std::size_t tokens, int channels, int heads) {
  const auto c = static_cast<std::size_t>(channels);
  return tokens * (5 * c) + static_cast<std::size_t>(heads) * tokens * tokens;
}

template struct VanillaParams<float>;
template struct VanillaParams<double>;
template VanillaParams<float> init_vanilla_params(int, int, Rng&);
template VanillaParams<double> init_vanilla_params(int, int, Rng&);
template TokenSequence<float> vanilla_forward(const TokenSequence<float>&,
                                              const VanillaParams<float>&);
template TokenSequence<double> vanilla_forward(const TokenSequence<double>&,
                                               const VanillaParams<double>&);
template Matrix<float> vanilla_attention_weights(const TokenSequence<float>&,
                                                 const VanillaParams<float>&, int);
template Matrix<double> vanilla_attention_weights(const TokenSequence<double>&,
                                                  const VanillaParams<double>&, int);

}  // namespace cotr
