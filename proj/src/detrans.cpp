// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/detrans.hpp"

#include <cmath>

namespace cotr {
namespace {

template <typename T>
void add_into(Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("detrans: residual shape mismatch");
  }
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

template <typename T>
Matrix<T> dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  Matrix<T> mask(rows, cols);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = rng.uniform() < rate ? T{0} : keep_scale;
  return mask;
}

template <typename T>
void apply_mask(Matrix<T>& x, const Matrix<T>& mask) {
  if (mask.size() == 0) return;
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] *= mask.data()[i];
}

template <typename T>
void xavier(Param<T>& p, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(p.shape[0] + p.shape[1]));
  rng.fill_uniform<T>(p.value, -bound, bound);
}

}  // namespace

template <typename T>
FfnParams<T> FfnParams<T>::zeros(int channels, int hidden) {
  if (channels <= 0 || hidden <= 0) throw ConfigError("ffn: widths must be positive");
  const auto c = static_cast<std::size_t>(channels);
  const auto f = static_cast<std::size_t>(hidden);
  FfnParams<T> p;
  p.w1 = Param<T>({f, c});
  p.b1 = Param<T>({f});
  p.w2 = Param<T>({c, f});
  p.b2 = Param<T>({c});
  return p;
}

template <typename T>
Matrix<T> ffn(const Matrix<T>& x, const FfnParams<T>& params, FfnWorkspace<T>* ws, Rng* rng) {
  if (params.dropout < 0.0 || params.dropout >= 1.0) {
    throw ConfigError("ffn: dropout rate must be in [0, 1)");
  }
  const bool drop = rng != nullptr && params.dropout > 0.0;
  Matrix<T> hidden = linear(x, params.w1, params.b1);
  for (auto& v : hidden.data()) v = v > T{0} ? v : T{0};
  Matrix<T> mask1;
  Matrix<T> mask2;
  if (drop) {
    mask1 = dropout_mask<T>(hidden.rows(), hidden.cols(), params.dropout, *rng);
    apply_mask(hidden, mask1);
  }
  Matrix<T> out = linear(hidden, params.w2, params.b2);
  if (drop) {
    mask2 = dropout_mask<T>(out.rows(), out.cols(), params.dropout, *rng);
    apply_mask(out, mask2);
  }
  if (ws != nullptr) {
    ws->input = x;
    ws->hidden = std::move(hidden);
    ws->mask1 = std::move(mask1);
    ws->mask2 = std::move(mask2);
  }
  return out;
}

template <typename T>
Matrix<T> ffn_backward(const FfnWorkspace<T>& ws, const Matrix<T>& dy, FfnParams<T>& params) {
  Matrix<T> g = dy;
  apply_mask(g, ws.mask2);
  Matrix<T> dh = linear_backward(ws.hidden, params.w2, params.b2, g);
  for (std::size_t i = 0; i < dh.size(); ++i) {
    if (!(ws.hidden.data()[i] > T{0})) dh.data()[i] = T{0};
  }
  apply_mask(dh, ws.mask1);
  return linear_backward(ws.input, params.w1, params.b1, dh);
}

template <typename T>
DeTransLayerParams<T> DeTransLayerParams<T>::zeros(int channels, int heads, int levels,
                                                   int points, int hidden) {
  DeTransLayerParams<T> p;
  p.attn = DmsaParams<T>::zeros(channels, heads, levels, points);
  p.ffn = FfnParams<T>::zeros(channels, hidden);
  const auto c = static_cast<std::size_t>(channels);
  p.ln1_gain = Param<T>({c}, T{1});
  p.ln1_bias = Param<T>({c});
  p.ln2_gain = Param<T>({c}, T{1});
  p.ln2_bias = Param<T>({c});
  return p;
}

template <typename T>
DeTransLayerParams<T> init_detrans_layer(int channels, int heads, int levels, int points,
                                         int hidden, Rng& rng) {
  auto p = DeTransLayerParams<T>::zeros(channels, heads, levels, points, hidden);
  p.attn = init_dmsa_params<T>(channels, heads, levels, points, rng);
  xavier(p.ffn.w1, rng);
  xavier(p.ffn.w2, rng);
  return p;
}

template <typename T>
TokenSequence<T> detrans_layer(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                               const DeTransLayerParams<T>& params, DeTransWorkspace<T>* ws,
                               Rng* rng) {
  TokenSequence<T> attended =
      msdmsa_forward(seq, refs, params.attn, ws != nullptr ? &ws->attn : nullptr);
  add_into(attended.tokens, seq.tokens);
  Matrix<T> y = layer_norm_rows(attended.tokens, params.ln1_gain, params.ln1_bias, T(kNormEps),
                                ws != nullptr ? &ws->ln1 : nullptr);
  Matrix<T> f = ffn(y, params.ffn, ws != nullptr ? &ws->ffn : nullptr, rng);
  add_into(f, y);
  TokenSequence<T> out{layer_norm_rows(f, params.ln2_gain, params.ln2_bias, T(kNormEps),
                                       ws != nullptr ? &ws->ln2 : nullptr),
                       seq.layout};
  if (ws != nullptr) {
    ws->valid = true;
    ws->params = &params;
  }
  return out;
}

template <typename T>
Matrix<T> detrans_layer_backward(const DeTransWorkspace<T>& ws, const Matrix<T>& dy,
                                 DeTransLayerParams<T>& params) {
  if (!ws.valid || ws.params != &params) {
    throw StateError("detrans_layer_backward: workspace does not match these parameters");
  }
  Matrix<T> dr2 = layer_norm_rows_backward(ws.ln2, params.ln2_gain, params.ln2_bias, dy);
  Matrix<T> dy1 = ffn_backward(ws.ffn, dr2, params.ffn);
  add_into(dy1, dr2);
  Matrix<T> dr1 = layer_norm_rows_backward(ws.ln1, params.ln1_gain, params.ln1_bias, dy1);
  Matrix<T> dx = msdmsa_backward(ws.attn, dr1, params.attn);
  add_into(dx, dr1);
  return dx;
}

template <typename T>
EncoderParams<T> init_encoder(int layers, int channels, int heads, int levels, int points,
                              int hidden, Rng& rng) {
  if (layers < 0) throw ConfigError("encoder: negative layer count");
  EncoderParams<T> p;
  for (int i = 0; i < layers; ++i) {
    p.layers.push_back(init_detrans_layer<T>(channels, heads, levels, points, hidden, rng));
  }
  return p;
}

template <typename T>
EncoderOutput<T> encoder_forward(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                                 const EncoderParams<T>& params, EncoderWorkspace<T>* ws,
                                 Rng* rng) {
  EncoderOutput<T> out{seq, {}};
  if (ws != nullptr) ws->layers.assign(params.layers.size(), DeTransWorkspace<T>{});
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    out.output = detrans_layer(out.output, refs, params.layers[i],
                               ws != nullptr ? &ws->layers[i] : nullptr, rng);
    out.per_layer.push_back(out.output);
  }
  return out;
}

template <typename T>
Matrix<T> encoder_backward(const EncoderWorkspace<T>& ws, const Matrix<T>& dy,
                           EncoderParams<T>& params) {
  if (ws.layers.size() != params.layers.size()) {
    throw StateError("encoder_backward: workspace depth does not match parameters");
  }
  Matrix<T> g = dy;
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    g = detrans_layer_backward(ws.layers[i], g, params.layers[i]);
  }
  return g;
}

#define COTR_INSTANTIATE_DETRANS(T)                                                              \
  template struct FfnParams<T>;                                                                  \
  template struct DeTransLayerParams<T>;                                                         \
  template Matrix<T> ffn(const Matrix<T>&, const FfnParams<T>&, FfnWorkspace<T>*, Rng*);         \
  template Matrix<T> ffn_backward(const FfnWorkspace<T>&, const Matrix<T>&, FfnParams<T>&);      \
  template DeTransLayerParams<T> init_detrans_layer(int, int, int, int, int, Rng&);              \
  template TokenSequence<T> detrans_layer(const TokenSequence<T>&, const ReferencePoints<T>&,    \
                                          const DeTransLayerParams<T>&, DeTransWorkspace<T>*,    \
                                          Rng*);                                                 \
  template Matrix<T> detrans_layer_backward(const DeTransWorkspace<T>&, const Matrix<T>&,        \
                                            DeTransLayerParams<T>&);                             \
  template EncoderParams<T> init_encoder(int, int, int, int, int, int, Rng&);                    \
  template EncoderOutput<T> encoder_forward(const TokenSequence<T>&, const ReferencePoints<T>&,  \
                                            const EncoderParams<T>&, EncoderWorkspace<T>*, Rng*); \
  template Matrix<T> encoder_backward(const EncoderWorkspace<T>&, const Matrix<T>&,              \
                                      EncoderParams<T>&);

COTR_INSTANTIATE_DETRANS(float)
COTR_INSTANTIATE_DETRANS(double)

}  // namespace cotr
