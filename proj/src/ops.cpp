// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cotr {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// C (m x n) += A (m x k) * B (k x n), all row-major.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T where B is (n x k).
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C (m x n) += A^T * B where A is (k x m), B is (k x n).
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.cols() == b.rows(),
          "matmul: " + shape_str(a.rows(), a.cols()) + " * " + shape_str(b.rows(), b.cols()));
  Matrix<T> c(a.rows(), b.cols());
  gemm_nn(a.rows(), b.cols(), a.cols(), a.data().data(), b.data().data(), c.data().data());
  return c;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Matrix<T>& a, const Matrix<T>& b, const Matrix<T>& dc) {
  require(a.cols() == b.rows() && dc.rows() == a.rows() && dc.cols() == b.cols(),
          "matmul_backward: inconsistent shapes");
  MatmulGrads<T> g{Matrix<T>(a.rows(), a.cols()), Matrix<T>(b.rows(), b.cols())};
  gemm_nt(a.rows(), a.cols(), b.cols(), dc.data().data(), b.data().data(), g.da.data().data());
  gemm_tn(b.rows(), b.cols(), a.rows(), a.data().data(), dc.data().data(), g.db.data().data());
  return g;
}

template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Param<T>& weight, const Param<T>& bias) {
  const std::size_t out = weight.rows();
  require(weight.shape.size() == 2 && weight.shape[1] == x.cols(),
          "linear: input width " + std::to_string(x.cols()) + " vs weight " +
              shape_str(weight.rows(), weight.cols()));
  require(bias.size() == out, "linear: bias width mismatch");
  Matrix<T> y(x.rows(), out);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::copy(bias.value.begin(), bias.value.end(), y.row(r).begin());
  }
  gemm_nt(x.rows(), out, x.cols(), x.data().data(), weight.value.data(), y.data().data());
  return y;
}

template <typename T>
Matrix<T> linear_backward(const Matrix<T>& x, Param<T>& weight, Param<T>& bias,
                          const Matrix<T>& dy) {
  const std::size_t out = weight.rows();
  require(dy.rows() == x.rows() && dy.cols() == out, "linear_backward: dy shape");
  Matrix<T> dx(x.rows(), x.cols());
  gemm_nn(x.rows(), x.cols(), out, dy.data().data(), weight.value.data(), dx.data().data());
  gemm_tn(out, x.cols(), x.rows(), dy.data().data(), x.data().data(), weight.grad.data());
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto row = dy.row(r);
    for (std::size_t j = 0; j < out; ++j) bias.grad[j] += row[j];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax and layer norm
// ---------------------------------------------------------------------------

template <typename T>
void softmax_inplace(std::span<T> values) {
  require(!values.empty(), "softmax: empty input");
  const T peak = *std::max_element(values.begin(), values.end());
  T total = T{0};
  for (auto& v : values) {
    v = std::exp(v - peak);
    total += v;
  }
  const T inv = T{1} / total;
  for (auto& v : values) v *= inv;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> out(logits.begin(), logits.end());
  softmax_inplace<T>(out);
  return out;
}

template <typename T>
std::vector<T> softmax_backward(std::span<const T> probs, std::span<const T> dprobs) {
  require(probs.size() == dprobs.size(), "softmax_backward: length mismatch");
  const T inner = dot(probs, dprobs);
  std::vector<T> dz(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) dz[i] = probs[i] * (dprobs[i] - inner);
  return dz;
}

namespace {

// Normalizes x into xhat, returns 1/sqrt(var + eps). Two-pass statistics.
template <typename T>
T normalize(std::span<const T> x, std::span<T> xhat, T eps) {
  const T n = static_cast<T>(x.size());
  T mean = T{0};
  for (T v : x) mean += v;
  mean /= n;
  T var = T{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  const T inv_std = T{1} / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) xhat[i] = (x[i] - mean) * inv_std;
  return inv_std;
}

// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)) with g = dy * gain.
template <typename T>
void normalize_backward(std::span<const T> xhat, T inv_std, std::span<const T> gain_dy,
                        std::span<T> dx) {
  const T n = static_cast<T>(xhat.size());
  T sum_g = T{0};
  T sum_gx = T{0};
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    sum_g += gain_dy[i];
    sum_gx += gain_dy[i] * xhat[i];
  }
  const T mean_g = sum_g / n;
  const T mean_gx = sum_gx / n;
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    dx[i] = inv_std * (gain_dy[i] - mean_g - xhat[i] * mean_gx);
  }
}

}  // namespace

template <typename T>
std::vector<T> layer_norm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias,
                          T eps, LayerNormCache<T>* cache) {
  require(!x.empty() && gain.size() == x.size() && bias.size() == x.size(),
          "layer_norm: gain/bias length must equal input length " + std::to_string(x.size()));
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  std::vector<T> xhat(x.size());
  const T inv_std = normalize<T>(x, xhat, eps);
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gain[i] * xhat[i] + bias[i];
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
  }
  return y;
}

template <typename T>
std::vector<T> layer_norm_backward(const LayerNormCache<T>& cache, std::span<const T> gain,
                                   std::span<const T> dy, std::span<T> dgain,
                                   std::span<T> dbias) {
  const std::size_t n = cache.xhat.size();
  require(gain.size() == n && dy.size() == n && dgain.size() == n && dbias.size() == n,
          "layer_norm_backward: length mismatch");
  std::vector<T> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = dy[i] * gain[i];
    dgain[i] += dy[i] * cache.xhat[i];
    dbias[i] += dy[i];
  }
  std::vector<T> dx(n);
  normalize_backward<T>(cache.xhat, cache.inv_std, g, dx);
  return dx;
}

template <typename T>
Matrix<T> layer_norm_rows(const Matrix<T>& x, const Param<T>& gain, const Param<T>& bias, T eps,
                          RowNormCache<T>* cache) {
  const std::size_t c = x.cols();
  require(gain.size() == c && bias.size() == c, "layer_norm_rows: gain/bias width mismatch");
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  Matrix<T> xhat(x.rows(), c);
  std::vector<T> inv_std(x.rows());
  Matrix<T> y(x.rows(), c);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    inv_std[r] = normalize<T>(x.row(r), xhat.row(r), eps);
    auto yr = y.row(r);
    auto xr = xhat.row(r);
    for (std::size_t j = 0; j < c; ++j) yr[j] = gain.value[j] * xr[j] + bias.value[j];
  }
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_rows_backward(const RowNormCache<T>& cache, Param<T>& gain, Param<T>& bias,
                                   const Matrix<T>& dy) {
  const std::size_t c = cache.xhat.cols();
  require(dy.rows() == cache.xhat.rows() && dy.cols() == c,
          "layer_norm_rows_backward: dy shape");
  Matrix<T> dx(dy.rows(), c);
  std::vector<T> g(c);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    auto dyr = dy.row(r);
    auto xr = cache.xhat.row(r);
    for (std::size_t j = 0; j < c; ++j) {
      g[j] = dyr[j] * gain.value[j];
      gain.grad[j] += dyr[j] * xr[j];
      bias.grad[j] += dyr[j];
    }
    normalize_backward<T>(xr, cache.inv_std[r], g, dx.row(r));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

Dims3 ConvGeometry::conv_output(Dims3 in) const {
  validate();
  auto axis = [](int n, int k, int s, int p, const char* name) {
    const int padded = n + 2 * p;
    if (k > padded) {
      throw DimensionError(std::string("conv3d: kernel extent ") + std::to_string(k) +
                           " exceeds padded input " + std::to_string(padded) + " on axis " +
                           name);
    }
    return (padded - k) / s + 1;
  };
  return {axis(in.d, kernel.d, stride.d, padding.d, "d"),
          axis(in.h, kernel.h, stride.h, padding.h, "h"),
          axis(in.w, kernel.w, stride.w, padding.w, "w")};
}

Dims3 ConvGeometry::transposed_output(Dims3 in) const {
  validate();
  Dims3 out{(in.d - 1) * stride.d - 2 * padding.d + kernel.d,
            (in.h - 1) * stride.h - 2 * padding.h + kernel.h,
            (in.w - 1) * stride.w - 2 * padding.w + kernel.w};
  if (!out.positive()) throw DimensionError("transposed_conv3d: non-positive output dims");
  return out;
}

void ConvGeometry::validate() const {
  if (in_channels <= 0 || out_channels <= 0 || !kernel.positive() || !stride.positive() ||
      padding.d < 0 || padding.h < 0 || padding.w < 0) {
    throw DimensionError("conv geometry: channels, kernel and stride must be positive");
  }
}

namespace {

// Range of output positions o with 0 <= o*s - p + k < n.
struct Span1 {
  int lo;
  int hi;
};

Span1 valid_outputs(int out_extent, int n, int s, int p, int k) {
  int lo = 0;
  while (lo < out_extent && lo * s - p + k < 0) ++lo;
  int hi = out_extent;
  while (hi > lo && (hi - 1) * s - p + k >= n) --hi;
  return {lo, hi};
}

std::size_t widx(const ConvGeometry& g, int o, int i, int kd, int kh, int kw) {
  return ((((static_cast<std::size_t>(o) * g.in_channels + i) * g.kernel.d + kd) * g.kernel.h +
           kh) *
              g.kernel.w +
          kw);
}

// Shared stencil walk for conv3d (forward, dx, dw) and, with roles swapped,
// for the transposed conv. The "small" side is iterated densely and the "big"
// side is reached through stride and padding. For each (small channel, big
// channel, tap, row) the callback gets the weight index, both row offsets,
// the element count and the big-side stride.
template <typename F>
void for_each_tap(const ConvGeometry& g, int small_channels, int big_channels, Dims3 small_dims,
                  Dims3 big_dims, F&& row_op) {
  for (int o = 0; o < small_channels; ++o) {
    for (int i = 0; i < big_channels; ++i) {
      for (int kd = 0; kd < g.kernel.d; ++kd) {
        const Span1 zs = valid_outputs(small_dims.d, big_dims.d, g.stride.d, g.padding.d, kd);
        for (int kh = 0; kh < g.kernel.h; ++kh) {
          const Span1 ys = valid_outputs(small_dims.h, big_dims.h, g.stride.h, g.padding.h, kh);
          for (int kw = 0; kw < g.kernel.w; ++kw) {
            const Span1 xs =
                valid_outputs(small_dims.w, big_dims.w, g.stride.w, g.padding.w, kw);
            if (xs.lo >= xs.hi) continue;
            const std::size_t wi = widx(g, o, i, kd, kh, kw);
            for (int z = zs.lo; z < zs.hi; ++z) {
              const int bz = z * g.stride.d - g.padding.d + kd;
              for (int y = ys.lo; y < ys.hi; ++y) {
                const int by = y * g.stride.h - g.padding.h + kh;
                const std::size_t srow =
                    ((static_cast<std::size_t>(o) * small_dims.d + z) * small_dims.h + y) *
                    small_dims.w;
                const std::size_t brow =
                    ((static_cast<std::size_t>(i) * big_dims.d + bz) * big_dims.h + by) *
                    big_dims.w;
                const int bx0 = xs.lo * g.stride.w - g.padding.w + kw;
                row_op(wi, srow + xs.lo, brow + bx0, xs.hi - xs.lo, g.stride.w);
              }
            }
          }
        }
      }
    }
  }
}

void check_input(const ConvGeometry& g, int channels, const char* op) {
  g.validate();
  if (channels != g.in_channels) {
    throw DimensionError(std::string(op) + ": input has " + std::to_string(channels) +
                         " channels, geometry expects " + std::to_string(g.in_channels));
  }
}

template <typename T>
void check_weights(const ConvGeometry& g, std::span<const T> weight, std::size_t bias_size,
                   const char* op) {
  if (weight.size() != g.weight_size()) {
    throw DimensionError(std::string(op) + ": weight length " + std::to_string(weight.size()) +
                         " != " + std::to_string(g.weight_size()));
  }
  if (bias_size != 0 && bias_size != static_cast<std::size_t>(g.out_channels)) {
    throw DimensionError(std::string(op) + ": bias length mismatch");
  }
}

}  // namespace

template <typename T>
Volume<T> conv3d(const Volume<T>& x, std::span<const T> weight, std::span<const T> bias,
                 const ConvGeometry& geo) {
  check_input(geo, x.channels(), "conv3d");
  check_weights<T>(geo, weight, bias.size(), "conv3d");
  const Dims3 od = geo.conv_output(x.dims());
  Volume<T> y(geo.out_channels, od);
  if (!bias.empty()) {
    for (int o = 0; o < geo.out_channels; ++o) {
      auto ch = y.channel(o);
      std::fill(ch.begin(), ch.end(), bias[o]);
    }
  }
  T* yp = y.data().data();
  const T* xp = x.data().data();
  const T* wp = weight.data();
  for_each_tap(geo, geo.out_channels, geo.in_channels, od, x.dims(),
               [&](std::size_t wi, std::size_t so, std::size_t bo, int n, int s) {
                 const T wv = wp[wi];
                 T* dst = yp + so;
                 const T* src = xp + bo;
                 if (s == 1) {
                   for (int t = 0; t < n; ++t) dst[t] += wv * src[t];
                 } else {
                   for (int t = 0; t < n; ++t) dst[t] += wv * src[t * s];
                 }
               });
  return y;
}

template <typename T>
Volume<T> conv3d_backward(const Volume<T>& x, std::span<const T> weight, const ConvGeometry& geo,
                          const Volume<T>& dy, std::span<T> dweight, std::span<T> dbias) {
  check_input(geo, x.channels(), "conv3d_backward");
  check_weights<T>(geo, weight, dbias.size(), "conv3d_backward");
  const Dims3 od = geo.conv_output(x.dims());
  if (dy.channels() != geo.out_channels || dy.dims() != od) {
    throw DimensionError("conv3d_backward: dy shape does not match forward output");
  }
  if (dweight.size() != weight.size()) throw DimensionError("conv3d_backward: dweight length");
  Volume<T> dx(x.channels(), x.dims());
  T* dxp = dx.data().data();
  const T* xp = x.data().data();
  const T* dyp = dy.data().data();
  const T* wp = weight.data();
  for_each_tap(geo, geo.out_channels, geo.in_channels, od, x.dims(),
               [&](std::size_t wi, std::size_t so, std::size_t bo, int n, int s) {
                 const T wv = wp[wi];
                 const T* g = dyp + so;
                 T* dst = dxp + bo;
                 const T* src = xp + bo;
                 T acc = T{0};
                 if (s == 1) {
                   for (int t = 0; t < n; ++t) {
                     dst[t] += wv * g[t];
                     acc += g[t] * src[t];
                   }
                 } else {
                   for (int t = 0; t < n; ++t) {
                     dst[t * s] += wv * g[t];
                     acc += g[t] * src[t * s];
                   }
                 }
                 dweight[wi] += acc;
               });
  if (!dbias.empty()) {
    for (int o = 0; o < geo.out_channels; ++o) {
      T acc = T{0};
      for (T v : dy.channel(o)) acc += v;
      dbias[o] += acc;
    }
  }
  return dx;
}

template <typename T>
Volume<T> transposed_conv3d(const Volume<T>& x, std::span<const T> weight,
                            std::span<const T> bias, const ConvGeometry& geo) {
  check_input(geo, x.channels(), "transposed_conv3d");
  check_weights<T>(geo, weight, bias.size(), "transposed_conv3d");
  const Dims3 od = geo.transposed_output(x.dims());
  Volume<T> y(geo.out_channels, od);
  if (!bias.empty()) {
    for (int o = 0; o < geo.out_channels; ++o) {
      auto ch = y.channel(o);
      std::fill(ch.begin(), ch.end(), bias[o]);
    }
  }
  // The input plays the strided ("small") side; weights are (in, out, k).
  T* yp = y.data().data();
  const T* xp = x.data().data();
  const T* wp = weight.data();
  ConvGeometry as_conv = geo;
  std::swap(as_conv.in_channels, as_conv.out_channels);
  for_each_tap(as_conv, geo.in_channels, geo.out_channels, x.dims(), od,
               [&](std::size_t wi, std::size_t so, std::size_t bo, int n, int s) {
                 const T wv = wp[wi];
                 const T* src = xp + so;
                 T* dst = yp + bo;
                 if (s == 1) {
                   for (int t = 0; t < n; ++t) dst[t] += wv * src[t];
                 } else {
                   for (int t = 0; t < n; ++t) dst[t * s] += wv * src[t];
                 }
               });
  return y;
}

template <typename T>
Volume<T> transposed_conv3d_backward(const Volume<T>& x, std::span<const T> weight,
                                     const ConvGeometry& geo, const Volume<T>& dy,
                                     std::span<T> dweight, std::span<T> dbias) {
  check_input(geo, x.channels(), "transposed_conv3d_backward");
  check_weights<T>(geo, weight, dbias.size(), "transposed_conv3d_backward");
  const Dims3 od = geo.transposed_output(x.dims());
  if (dy.channels() != geo.out_channels || dy.dims() != od) {
    throw DimensionError("transposed_conv3d_backward: dy shape does not match forward output");
  }
  if (dweight.size() != weight.size()) {
    throw DimensionError("transposed_conv3d_backward: dweight length");
  }
  Volume<T> dx(x.channels(), x.dims());
  T* dxp = dx.data().data();
  const T* xp = x.data().data();
  const T* dyp = dy.data().data();
  const T* wp = weight.data();
  ConvGeometry as_conv = geo;
  std::swap(as_conv.in_channels, as_conv.out_channels);
  for_each_tap(as_conv, geo.in_channels, geo.out_channels, x.dims(), od,
               [&](std::size_t wi, std::size_t so, std::size_t bo, int n, int s) {
                 const T wv = wp[wi];
                 const T* src = xp + so;
                 T* dst = dxp + so;
                 const T* g = dyp + bo;
                 T acc = T{0};
                 if (s == 1) {
                   for (int t = 0; t < n; ++t) {
                     dst[t] += wv * g[t];
                     acc += src[t] * g[t];
                   }
                 } else {
                   for (int t = 0; t < n; ++t) {
                     dst[t] += wv * g[t * s];
                     acc += src[t] * g[t * s];
                   }
                 }
                 dweight[wi] += acc;
               });
  if (!dbias.empty()) {
    for (int o = 0; o < geo.out_channels; ++o) {
      T acc = T{0};
      for (T v : dy.channel(o)) acc += v;
      dbias[o] += acc;
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Instance norm and elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Volume<T> instance_norm(const Volume<T>& x, std::span<const T> gain, std::span<const T> bias,
                        T eps, InstanceNormCache<T>* cache) {
  const auto c = static_cast<std::size_t>(x.channels());
  require(gain.size() == c && bias.size() == c,
          "instance_norm: gain/bias length must equal channel count " + std::to_string(c));
  if (!(eps > T{0})) throw ConfigError("instance_norm: eps must be positive");
  Volume<T> xhat(x.channels(), x.dims());
  std::vector<T> inv_std(c);
  Volume<T> y(x.channels(), x.dims());
  for (int ch = 0; ch < x.channels(); ++ch) {
    inv_std[ch] = normalize<T>(x.channel(ch), xhat.channel(ch), eps);
    auto yc = y.channel(ch);
    auto xc = xhat.channel(ch);
    for (std::size_t i = 0; i < yc.size(); ++i) yc[i] = gain[ch] * xc[i] + bias[ch];
  }
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Volume<T> instance_norm_backward(const InstanceNormCache<T>& cache, std::span<const T> gain,
                                 const Volume<T>& dy, std::span<T> dgain, std::span<T> dbias) {
  require(dy.same_shape(cache.xhat), "instance_norm_backward: dy shape");
  const auto c = static_cast<std::size_t>(dy.channels());
  require(gain.size() == c && dgain.size() == c && dbias.size() == c,
          "instance_norm_backward: gain length");
  Volume<T> dx(dy.channels(), dy.dims());
  std::vector<T> g(dy.spatial());
  for (int ch = 0; ch < dy.channels(); ++ch) {
    auto dyc = dy.channel(ch);
    auto xc = cache.xhat.channel(ch);
    T sg = T{0};
    T sb = T{0};
    for (std::size_t i = 0; i < dyc.size(); ++i) {
      g[i] = dyc[i] * gain[ch];
      sg += dyc[i] * xc[i];
      sb += dyc[i];
    }
    dgain[ch] += sg;
    dbias[ch] += sb;
    normalize_backward<T>(xc, cache.inv_std[ch], g, dx.channel(ch));
  }
  return dx;
}

template <typename T>
Volume<T> relu(const Volume<T>& x) {
  Volume<T> y(x.channels(), x.dims());
  auto src = x.data();
  auto dst = y.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
  return y;
}

template <typename T>
Volume<T> relu_backward(const Volume<T>& y, const Volume<T>& dy) {
  require(y.same_shape(dy), "relu_backward: shape mismatch");
  Volume<T> dx(y.channels(), y.dims());
  auto yv = y.data();
  auto g = dy.data();
  auto dst = dx.data();
  for (std::size_t i = 0; i < yv.size(); ++i) dst[i] = yv[i] > T{0} ? g[i] : T{0};
  return dx;
}

template <typename T>
Volume<T> add(const Volume<T>& a, const Volume<T>& b) {
  Volume<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
void add_inplace(Volume<T>& a, const Volume<T>& b) {
  require(a.same_shape(b), "add: shape mismatch " + std::to_string(a.channels()) + "x" +
                               to_string(a.dims()) + " vs " + std::to_string(b.channels()) +
                               "x" + to_string(b.dims()));
  auto dst = a.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  T acc = T{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Linear upsampling
// ---------------------------------------------------------------------------

namespace {

struct LerpTap {
  int lo;
  int hi;
  double whi;  // weight of hi; lo gets 1 - whi
};

std::vector<LerpTap> lerp_taps(int n, int factor) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(n) * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) / factor - 0.5);
    const int lo = std::min(static_cast<int>(src), n - 1);
    const int hi = std::min(lo + 1, n - 1);
    taps[o] = {lo, hi, hi == lo ? 0.0 : src - lo};
  }
  return taps;
}

// Resamples one axis. `outer` blocks of `n` slices, each slice `inner` long.
template <typename T>
void lerp_axis(const T* in, T* out, std::size_t outer, int n, std::size_t inner,
               const std::vector<LerpTap>& taps) {
  const std::size_t m = taps.size();
  for (std::size_t b = 0; b < outer; ++b) {
    const T* src = in + b * n * inner;
    T* dst = out + b * m * inner;
    for (std::size_t o = 0; o < m; ++o) {
      const T wh = static_cast<T>(taps[o].whi);
      const T wl = T{1} - wh;
      const T* a = src + taps[o].lo * inner;
      const T* c = src + taps[o].hi * inner;
      T* d = dst + o * inner;
      for (std::size_t i = 0; i < inner; ++i) d[i] = wl * a[i] + wh * c[i];
    }
  }
}

// Adjoint of lerp_axis: scatters `out`-shaped gradients back onto `n` slices.
template <typename T>
void lerp_axis_adjoint(const T* dout, T* din, std::size_t outer, int n, std::size_t inner,
                       const std::vector<LerpTap>& taps) {
  const std::size_t m = taps.size();
  for (std::size_t b = 0; b < outer; ++b) {
    const T* src = dout + b * m * inner;
    T* dst = din + b * n * inner;
    for (std::size_t o = 0; o < m; ++o) {
      const T wh = static_cast<T>(taps[o].whi);
      const T wl = T{1} - wh;
      T* a = dst + taps[o].lo * inner;
      T* c = dst + taps[o].hi * inner;
      const T* g = src + o * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        a[i] += wl * g[i];
        c[i] += wh * g[i];
      }
    }
  }
}

}  // namespace

template <typename T>
Volume<T> upsample_linear(const Volume<T>& x, Dims3 factor) {
  require(factor.positive(), "upsample_linear: factors must be positive");
  const Dims3 in = x.dims();
  const auto ch = static_cast<std::size_t>(x.channels());
  Volume<T> a(x.channels(), {in.d, in.h, in.w * factor.w});
  lerp_axis(x.data().data(), a.data().data(), ch * in.d * in.h, in.w, 1, lerp_taps(in.w, factor.w));
  Volume<T> b(x.channels(), {in.d, in.h * factor.h, in.w * factor.w});
  lerp_axis(a.data().data(), b.data().data(), ch * in.d, in.h,
            static_cast<std::size_t>(in.w) * factor.w, lerp_taps(in.h, factor.h));
  Volume<T> c(x.channels(), {in.d * factor.d, in.h * factor.h, in.w * factor.w});
  lerp_axis(b.data().data(), c.data().data(), ch, in.d,
            static_cast<std::size_t>(in.h) * factor.h * in.w * factor.w, lerp_taps(in.d, factor.d));
  return c;
}

template <typename T>
Volume<T> upsample_linear_backward(Dims3 in, Dims3 factor, const Volume<T>& dy) {
  require(factor.positive(), "upsample_linear_backward: factors must be positive");
  const Dims3 out{in.d * factor.d, in.h * factor.h, in.w * factor.w};
  require(dy.dims() == out, "upsample_linear_backward: dy dims do not match the forward output");
  const auto ch = static_cast<std::size_t>(dy.channels());
  Volume<T> b(dy.channels(), {in.d, out.h, out.w});
  lerp_axis_adjoint(dy.data().data(), b.data().data(), ch, in.d,
                    static_cast<std::size_t>(out.h) * out.w, lerp_taps(in.d, factor.d));
  Volume<T> a(dy.channels(), {in.d, in.h, out.w});
  lerp_axis_adjoint(b.data().data(), a.data().data(), ch * in.d, in.h,
                    static_cast<std::size_t>(out.w), lerp_taps(in.h, factor.h));
  Volume<T> dx(dy.channels(), in);
  lerp_axis_adjoint(a.data().data(), dx.data().data(), ch * in.d * in.h, in.w, 1,
                    lerp_taps(in.w, factor.w));
  return dx;
}

#define COTR_INSTANTIATE_OPS(T)                                                                  \
  template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                                \
  template MatmulGrads<T> matmul_backward(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&); \
  template Matrix<T> linear(const Matrix<T>&, const Param<T>&, const Param<T>&);                \
  template Matrix<T> linear_backward(const Matrix<T>&, Param<T>&, Param<T>&, const Matrix<T>&);  \
  template std::vector<T> softmax(std::span<const T>);                                          \
  template void softmax_inplace(std::span<T>);                                                  \
  template std::vector<T> softmax_backward(std::span<const T>, std::span<const T>);             \
  template std::vector<T> layer_norm(std::span<const T>, std::span<const T>, std::span<const T>, \
                                     T, LayerNormCache<T>*);                                     \
  template std::vector<T> layer_norm_backward(const LayerNormCache<T>&, std::span<const T>,      \
                                              std::span<const T>, std::span<T>, std::span<T>);   \
  template Matrix<T> layer_norm_rows(const Matrix<T>&, const Param<T>&, const Param<T>&, T,      \
                                     RowNormCache<T>*);                                          \
  template Matrix<T> layer_norm_rows_backward(const RowNormCache<T>&, Param<T>&, Param<T>&,      \
                                              const Matrix<T>&);                                 \
  template Volume<T> conv3d(const Volume<T>&, std::span<const T>, std::span<const T>,            \
                            const ConvGeometry&);                                                \
  template Volume<T> conv3d_backward(const Volume<T>&, std::span<const T>, const ConvGeometry&,  \
                                     const Volume<T>&, std::span<T>, std::span<T>);              \
  template Volume<T> transposed_conv3d(const Volume<T>&, std::span<const T>, std::span<const T>, \
                                       const ConvGeometry&);                                     \
  template Volume<T> transposed_conv3d_backward(const Volume<T>&, std::span<const T>,            \
                                                const ConvGeometry&, const Volume<T>&,           \
                                                std::span<T>, std::span<T>);                     \
  template Volume<T> instance_norm(const Volume<T>&, std::span<const T>, std::span<const T>, T,  \
                                   InstanceNormCache<T>*);                                       \
  template Volume<T> instance_norm_backward(const InstanceNormCache<T>&, std::span<const T>,     \
                                            const Volume<T>&, std::span<T>, std::span<T>);       \
  template Volume<T> relu(const Volume<T>&);                                                    \
  template Volume<T> relu_backward(const Volume<T>&, const Volume<T>&);                         \
  template Volume<T> add(const Volume<T>&, const Volume<T>&);                                   \
  template void add_inplace(Volume<T>&, const Volume<T>&);                                      \
  template T dot(std::span<const T>, std::span<const T>);                                      \
  template Volume<T> upsample_linear(const Volume<T>&, Dims3);                                   \
  template Volume<T> upsample_linear_backward(Dims3, Dims3, const Volume<T>&);

COTR_INSTANTIATE_OPS(float)
COTR_INSTANTIATE_OPS(double)

}  // namespace cotr
