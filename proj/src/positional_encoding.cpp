// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/positional_encoding.hpp"

#include <cmath>
#include <string>

namespace cotr {
namespace {

void check_channels(int channels) {
  if (channels < 6 || channels % 6 != 0) {
    throw ConfigError("positional encoding needs channels divisible by 6, got " +
                      std::to_string(channels));
  }
}

}  // namespace

std::pair<double, double> sinusoid_1d(int pos, int k, int channels) {
  check_channels(channels);
  const int per_axis = channels / 3;
  if (k < 0 || 2 * k + 1 >= per_axis) {
    throw IndexError("sinusoid_1d: pair index " + std::to_string(k) + " out of range for " +
                     std::to_string(per_axis) + " channels per axis");
  }
  if (pos < 0) throw IndexError("sinusoid_1d: negative position");
  const double freq = 1.0 / std::pow(10000.0, 2.0 * k / static_cast<double>(per_axis));
  const double angle = static_cast<double>(pos) * freq;
  return {std::sin(angle), std::cos(angle)};
}

template <typename T>
Matrix<T> build_pe_table(const Dims3& dims, int channels) {
  check_channels(channels);
  if (!dims.positive()) throw DimensionError("build_pe: dims must be positive");
  const int per_axis = channels / 3;
  const int pairs = per_axis / 2;
  // Per-axis tables first; rows then just concatenate three lookups.
  auto axis_table = [&](int extent) {
    std::vector<T> table(static_cast<std::size_t>(extent) * per_axis);
    for (int pos = 0; pos < extent; ++pos) {
      for (int k = 0; k < pairs; ++k) {
        const auto [s, c] = sinusoid_1d(pos, k, channels);
        table[static_cast<std::size_t>(pos) * per_axis + 2 * k] = static_cast<T>(s);
        table[static_cast<std::size_t>(pos) * per_axis + 2 * k + 1] = static_cast<T>(c);
      }
    }
    return table;
  };
  const auto td = axis_table(dims.d);
  const auto th = axis_table(dims.h);
  const auto tw = axis_table(dims.w);

  Matrix<T> pe(dims.count(), static_cast<std::size_t>(channels));
  std::size_t row = 0;
  for (int d = 0; d < dims.d; ++d) {
    for (int h = 0; h < dims.h; ++h) {
      for (int w = 0; w < dims.w; ++w, ++row) {
        auto r = pe.row(row);
        for (int j = 0; j < per_axis; ++j) {
          r[j] = td[static_cast<std::size_t>(d) * per_axis + j];
          r[per_axis + j] = th[static_cast<std::size_t>(h) * per_axis + j];
          r[2 * per_axis + j] = tw[static_cast<std::size_t>(w) * per_axis + j];
        }
      }
    }
  }
  return pe;
}

template <typename T>
PositionalEncoding<T> build_pe(const LevelLayout& layout, int channels) {
  PositionalEncoding<T> pe;
  pe.channels = channels;
  for (std::size_t l = 0; l < layout.levels(); ++l) {
    pe.levels.push_back(build_pe_table<T>(layout.dims(l), channels));
  }
  return pe;
}

template <typename T>
TokenSequence<T> add_pe(const TokenSequence<T>& seq, const PositionalEncoding<T>& pe) {
  seq.validate();
  if (pe.levels.size() != seq.layout.levels() ||
      static_cast<std::size_t>(pe.channels) != seq.channels()) {
    throw DimensionError("add_pe: encoding does not match sequence levels/channels");
  }
  TokenSequence<T> out = seq;
  for (std::size_t l = 0; l < pe.levels.size(); ++l) {
    const auto& table = pe.levels[l];
    if (table.rows() != seq.layout.size(l)) {
      throw DimensionError("add_pe: level " + std::to_string(l) + " size mismatch");
    }
    const std::size_t base = seq.layout.offset(l);
    for (std::size_t i = 0; i < table.rows(); ++i) {
      auto dst = out.tokens.row(base + i);
      auto src = table.row(i);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  return out;
}

template Matrix<float> build_pe_table(const Dims3&, int);
template Matrix<double> build_pe_table(const Dims3&, int);
template PositionalEncoding<float> build_pe(const LevelLayout&, int);
template PositionalEncoding<double> build_pe(const LevelLayout&, int);
template TokenSequence<float> add_pe(const TokenSequence<float>&, const PositionalEncoding<float>&);
template TokenSequence<double> add_pe(const TokenSequence<double>&,
                                      const PositionalEncoding<double>&);

}  // namespace cotr
