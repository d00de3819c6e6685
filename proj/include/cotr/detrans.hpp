// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// DeTrans layers: post-norm residual blocks
//
//   y   = LN1(x + MSDMSA(x))
//   out = LN2(y + FFN(y)),   FFN = Linear -> ReLU -> Dropout -> Linear -> Dropout
//
// stacked into an encoder. Reference points are shared by all layers.

#pragma once

#include <string>
#include <vector>

#include "cotr/msdmsa.hpp"
#include "cotr/ops.hpp"

namespace cotr {

template <typename T>
struct FfnParams {
  Param<T> w1;  // F x C
  Param<T> b1;
  Param<T> w2;  // C x F
  Param<T> b2;
  double dropout = 0.0;

  static FfnParams zeros(int channels, int hidden);

  template <typename F>
  void visit(F&& f) {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
  }
};

template <typename T>
struct FfnWorkspace {
  Matrix<T> input;
  Matrix<T> hidden;  // post-ReLU, post-dropout
  Matrix<T> mask1;   // dropout scale per element (empty when dropout is off)
  Matrix<T> mask2;
};

/// Dropout is applied only when `rng` is given and the rate is positive.
template <typename T>
Matrix<T> ffn(const Matrix<T>& x, const FfnParams<T>& params, FfnWorkspace<T>* workspace = nullptr,
              Rng* rng = nullptr);

template <typename T>
Matrix<T> ffn_backward(const FfnWorkspace<T>& workspace, const Matrix<T>& dy, FfnParams<T>& params);

template <typename T>
struct DeTransLayerParams {
  DmsaParams<T> attn;
  FfnParams<T> ffn;
  Param<T> ln1_gain;
  Param<T> ln1_bias;
  Param<T> ln2_gain;
  Param<T> ln2_bias;

  /// Zero attention/FFN weights, identity layer-norm affines.
  static DeTransLayerParams zeros(int channels, int heads, int levels, int points, int hidden);

  template <typename F>
  void visit(F&& f, const std::string& prefix = "") {
    attn.visit([&](const std::string& n, Param<T>& p) { f(prefix + "attn." + n, p); });
    ffn.visit([&](const std::string& n, Param<T>& p) { f(prefix + "ffn." + n, p); });
    f(prefix + "ln1_gain", ln1_gain);
    f(prefix + "ln1_bias", ln1_bias);
    f(prefix + "ln2_gain", ln2_gain);
    f(prefix + "ln2_bias", ln2_bias);
  }
};

template <typename T>
DeTransLayerParams<T> init_detrans_layer(int channels, int heads, int levels, int points,
                                         int hidden, Rng& rng);

template <typename T>
struct DeTransWorkspace {
  bool valid = false;
  const DeTransLayerParams<T>* params = nullptr;
  DmsaWorkspace<T> attn;
  RowNormCache<T> ln1;
  FfnWorkspace<T> ffn;
  RowNormCache<T> ln2;
};

template <typename T>
TokenSequence<T> detrans_layer(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                               const DeTransLayerParams<T>& params,
                               DeTransWorkspace<T>* workspace = nullptr, Rng* rng = nullptr);

template <typename T>
Matrix<T> detrans_layer_backward(const DeTransWorkspace<T>& workspace, const Matrix<T>& dy,
                                 DeTransLayerParams<T>& params);

template <typename T>
struct EncoderParams {
  std::vector<DeTransLayerParams<T>> layers;

  template <typename F>
  void visit(F&& f, const std::string& prefix = "") {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].visit(f, prefix + "layer" + std::to_string(i) + ".");
    }
  }
};

template <typename T>
EncoderParams<T> init_encoder(int layers, int channels, int heads, int levels, int points,
                              int hidden, Rng& rng);

template <typename T>
struct EncoderOutput {
  TokenSequence<T> output;
  std::vector<TokenSequence<T>> per_layer;  // output of every layer, in order
};

template <typename T>
struct EncoderWorkspace {
  std::vector<DeTransWorkspace<T>> layers;
};

template <typename T>
EncoderOutput<T> encoder_forward(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                                 const EncoderParams<T>& params,
                                 EncoderWorkspace<T>* workspace = nullptr, Rng* rng = nullptr);

template <typename T>
Matrix<T> encoder_backward(const EncoderWorkspace<T>& workspace, const Matrix<T>& dy,
                           EncoderParams<T>& params);

}  // namespace cotr
