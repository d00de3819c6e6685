// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Dense numeric primitives with hand-written backward passes. Every backward
// accumulates parameter gradients into the spans it is given and returns the
// gradient with respect to its primary input.

#pragma once

#include <span>
#include <vector>

#include "cotr/tensor.hpp"

namespace cotr {

inline constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
struct MatmulGrads {
  Matrix<T> da;
  Matrix<T> db;
};

/// dA = dC * B^T, dB = A^T * dC.
template <typename T>
MatmulGrads<T> matmul_backward(const Matrix<T>& a, const Matrix<T>& b, const Matrix<T>& dc);

/// y = x W^T + b with W stored (out x in), applied to every row of x.
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Param<T>& weight, const Param<T>& bias);

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, Param<T>& weight, Param<T>& bias,
                          const Matrix<T>& dy);

// ---------------------------------------------------------------------------
// Softmax and layer norm
// ---------------------------------------------------------------------------

template <typename T>
std::vector<T> softmax(std::span<const T> logits);

template <typename T>
void softmax_inplace(std::span<T> values);

/// Given p = softmax(z) and dL/dp, returns dL/dz.
template <typename T>
std::vector<T> softmax_backward(std::span<const T> probs, std::span<const T> dprobs);

template <typename T>
struct LayerNormCache {
  std::vector<T> xhat;
  T inv_std = T{0};
};

template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain,
                          std::span<const T> bias, T eps = T(kNormEps),
                          LayerNormCache<T>* cache = nullptr);

template <typename T>
std::vector<T> layer_norm_backward(const LayerNormCache<T>& cache, std::span<const T> gain,
                                   std::span<const T> dy, std::span<T> dgain,
                                   std::span<T> dbias);

template <typename T>
struct RowNormCache {
  Matrix<T> xhat;
  std::vector<T> inv_std;
};

/// Layer norm over each row of a token matrix.
template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Param<T>& gain, const Param<T>& bias,
                          T eps = T(kNormEps), RowNormCache<T>* cache = nullptr);

template <typename T>
Matrix<T> layer_norm_rows_backward(const RowNormCache<T>& cache, Param<T>& gain,
                                   Param<T>& bias, const Matrix<T>& dy);

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

/// Conv weights are laid out (out, in, kd, kh, kw). Transposed-conv weights
/// are laid out (in, out, kd, kh, kw), so a conv and the transposed conv with
/// swapped channel counts share one weight array and are adjoint.
struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  Dims3 kernel{1, 1, 1};
  Dims3 stride{1, 1, 1};
  Dims3 padding{0, 0, 0};

  std::size_t weight_size() const {
    return static_cast<std::size_t>(in_channels) * out_channels * kernel.count();
  }
  /// floor((in + 2 pad - k) / stride) + 1 per axis.
  Dims3 conv_output(Dims3 in) const;
  /// (in - 1) * stride - 2 pad + k per axis.
  Dims3 transposed_output(Dims3 in) const;
  void validate() const;
};

template <typename T>
Volume<T> conv3d(const Volume<T>& x, std::span<const T> weight, std::span<const T> bias,
                 const ConvGeometry& geo);

/// Returns dx; accumulates into dweight and (if non-empty) dbias.
template <typename T>
Volume<T> conv3d_backward(const Volume<T>& x, std::span<const T> weight,
                          const ConvGeometry& geo, const Volume<T>& dy,
                          std::span<T> dweight, std::span<T> dbias);

template <typename T>
Volume<T> transposed_conv3d(const Volume<T>& x, std::span<const T> weight,
                            std::span<const T> bias, const ConvGeometry& geo);

template <typename T>
Volume<T> transposed_conv3d_backward(const Volume<T>& x, std::span<const T> weight,
                                     const ConvGeometry& geo, const Volume<T>& dy,
                                     std::span<T> dweight, std::span<T> dbias);

// ---------------------------------------------------------------------------
// Instance norm and elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
struct InstanceNormCache {
  Volume<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
Volume<T> instance_norm(const Volume<T>& x, std::span<const T> gain, std::span<const T> bias,
                        T eps = T(kNormEps), InstanceNormCache<T>* cache = nullptr);

template <typename T>
Volume<T> instance_norm_backward(const InstanceNormCache<T>& cache, std::span<const T> gain,
                                 const Volume<T>& dy, std::span<T> dgain, std::span<T> dbias);

template <typename T>
Volume<T> relu(const Volume<T>& x);

/// Gradient through ReLU given its forward output.
template <typename T>
Volume<T> relu_backward(const Volume<T>& y, const Volume<T>& dy);

template <typename T>
Volume<T> add(const Volume<T>& a, const Volume<T>& b);

template <typename T>
void add_inplace(Volume<T>& a, const Volume<T>& b);

/// Separable linear interpolation by integer factors with half-voxel
/// centres: output o samples input (o + 0.5) / f - 0.5, clamped to the grid.
template <typename T>
Volume<T> upsample_linear(const Volume<T>& x, Dims3 factor);

/// Adjoint of upsample_linear for an input of dims `in`.
template <typename T>
Volume<T> upsample_linear_backward(Dims3 in, Dims3 factor, const Volume<T>& dy);

template <typename T>
T dot(std::span<const T> a, std::span<const T> b);

}  // namespace cotr
