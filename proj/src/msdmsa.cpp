// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/msdmsa.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cotr/ops.hpp"

namespace cotr {
namespace {

template <typename T>
struct AxisWeights {
  int lo;
  int hi;
  T w_lo;
  T w_hi;
  T dw_lo;
  T dw_hi;
};

template <typename T>
AxisWeights<T> axis_weights(int n, T c) {
  if (n == 1) return {0, 0, T{1}, T{0}, T{0}, T{0}};
  const T top = static_cast<T>(n - 1);
  const T inside = (c > T{0} && c < top) ? T{1} : T{0};
  const T cc = std::clamp(c, T{0}, top);
  const int lo = std::min(static_cast<int>(std::floor(cc)), n - 2);
  const T f = cc - static_cast<T>(lo);
  return {lo, lo + 1, T{1} - f, f, -inside, inside};
}

void check_config(int channels, int heads, int levels, int points) {
  if (channels <= 0 || heads <= 0 || levels <= 0 || points <= 0) {
    throw ConfigError("msdmsa: C, H, L, K must be positive");
  }
  if (channels % heads != 0) {
    throw ConfigError("msdmsa: channels " + std::to_string(channels) +
                      " not divisible by heads " + std::to_string(heads));
  }
}

template <typename T>
void check_inputs(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                  const DmsaParams<T>& params) {
  params.validate();
  seq.validate();
  if (seq.channels() != static_cast<std::size_t>(params.channels)) {
    throw DimensionError("msdmsa: sequence width " + std::to_string(seq.channels()) +
                         " != params channels " + std::to_string(params.channels));
  }
  if (refs.size() != seq.size() || refs.coords.cols() != 3) {
    throw DimensionError("msdmsa: reference points must be N x 3 with N = " +
                         std::to_string(seq.size()));
  }
  if (seq.layout.levels() != static_cast<std::size_t>(params.levels)) {
    throw ConfigError("msdmsa: layout has " + std::to_string(seq.layout.levels()) +
                      " levels, params expect " + std::to_string(params.levels));
  }
}

// Softmax over each head's L*K logits of one row, in place.
template <typename T>
void normalize_heads(std::span<T> row, int heads, int per_head) {
  for (int i = 0; i < heads; ++i) {
    softmax_inplace<T>(row.subspan(static_cast<std::size_t>(i) * per_head, per_head));
  }
}

// Fills one query's sampling coordinates and head outputs from projected
// values, offsets (overwritten with absolute locations) and normalized weights.
template <typename T>
void gather_query(const Matrix<T>& value, const LevelLayout& layout,
                  const std::array<T, 3>& anchor, const DmsaParams<T>& p, std::span<T> locations,
                  std::span<const T> weights, std::span<T> heads_out, int only_head = -1) {
  const int ch = p.head_width();
  const std::size_t width = value.cols();
  for (int l = 0; l < p.levels; ++l) {
    const Dims3 dims = layout.dims(l);
    const auto base = rescale(anchor, dims);
    for (int i = 0; i < p.heads; ++i) {
      for (int k = 0; k < p.points; ++k) {
        const std::size_t s = (static_cast<std::size_t>(i) * p.levels + l) * p.points + k;
        for (int a = 0; a < 3; ++a) locations[3 * s + a] += base[a];
      }
    }
  }
  for (int i = 0; i < p.heads; ++i) {
    if (only_head >= 0 && i != only_head) continue;
    std::span<T> out = heads_out.subspan(static_cast<std::size_t>(i) * ch, ch);
    std::fill(out.begin(), out.end(), T{0});
    for (int l = 0; l < p.levels; ++l) {
      const Dims3 dims = layout.dims(l);
      const std::size_t level_base = layout.offset(l);
      for (int k = 0; k < p.points; ++k) {
        const std::size_t s = (static_cast<std::size_t>(i) * p.levels + l) * p.points + k;
        const std::array<T, 3> loc{locations[3 * s], locations[3 * s + 1], locations[3 * s + 2]};
        const auto st = trilinear_stencil(dims, loc);
        const T aw = weights[s];
        for (int c8 = 0; c8 < 8; ++c8) {
          const T cw = aw * st.weight[c8];
          if (cw == T{0}) continue;
          const T* v = value.data().data() + (level_base + st.voxel[c8]) * width +
                       static_cast<std::size_t>(i) * ch;
          for (int c = 0; c < ch; ++c) out[c] += cw * v[c];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
DmsaParams<T> DmsaParams<T>::zeros(int channels, int heads, int levels, int points) {
  check_config(channels, heads, levels, points);
  DmsaParams<T> p;
  p.channels = channels;
  p.heads = heads;
  p.levels = levels;
  p.points = points;
  const auto c = static_cast<std::size_t>(channels);
  const auto s = static_cast<std::size_t>(heads) * levels * points;
  p.value_weight = Param<T>({c, c});
  p.value_bias = Param<T>({c});
  p.offset_weight = Param<T>({s * 3, c});
  p.offset_bias = Param<T>({s * 3});
  p.attn_weight = Param<T>({s, c});
  p.attn_bias = Param<T>({s});
  p.out_weight = Param<T>({c, c});
  p.out_bias = Param<T>({c});
  return p;
}

template <typename T>
void DmsaParams<T>::validate() const {
  check_config(channels, heads, levels, points);
  const auto c = static_cast<std::size_t>(channels);
  const auto s = static_cast<std::size_t>(sample_count());
  auto expect = [](const Param<T>& p, std::size_t rows, std::size_t cols, const char* name) {
    if (p.size() != rows * cols || p.grad.size() != p.value.size()) {
      throw DimensionError(std::string("msdmsa: parameter ") + name + " has wrong size");
    }
  };
  expect(value_weight, c, c, "value_weight");
  expect(value_bias, c, 1, "value_bias");
  expect(offset_weight, 3 * s, c, "offset_weight");
  expect(offset_bias, 3 * s, 1, "offset_bias");
  expect(attn_weight, s, c, "attn_weight");
  expect(attn_bias, s, 1, "attn_bias");
  expect(out_weight, c, c, "out_weight");
  expect(out_bias, c, 1, "out_bias");
}

std::array<double, 3> head_direction(int head) {
  static const std::vector<std::array<double, 3>> kDirections = [] {
    std::vector<std::array<double, 3>> dirs = {{0, 0, 1}, {0, 1, 0},  {1, 0, 0},
                                               {0, 0, -1}, {0, -1, 0}, {-1, 0, 0}};
    for (int nonzero = 2; nonzero <= 3; ++nonzero) {
      for (int d = -1; d <= 1; ++d) {
        for (int h = -1; h <= 1; ++h) {
          for (int w = -1; w <= 1; ++w) {
            if ((d != 0) + (h != 0) + (w != 0) != nonzero) continue;
            const double n = std::sqrt(static_cast<double>(nonzero));
            dirs.push_back({d / n, h / n, w / n});
          }
        }
      }
    }
    return dirs;
  }();
  return kDirections[static_cast<std::size_t>(head) % kDirections.size()];
}

template <typename T>
DmsaParams<T> init_dmsa_params(int channels, int heads, int levels, int points, Rng& rng) {
  auto p = DmsaParams<T>::zeros(channels, heads, levels, points);
  const double bound = std::sqrt(6.0 / (2.0 * channels));
  rng.fill_uniform<T>(p.value_weight.value, -bound, bound);
  rng.fill_uniform<T>(p.out_weight.value, -bound, bound);
  for (int i = 0; i < heads; ++i) {
    const auto dir = head_direction(i);
    for (int l = 0; l < levels; ++l) {
      for (int k = 0; k < points; ++k) {
        const std::size_t s = (static_cast<std::size_t>(i) * levels + l) * points + k;
        for (int a = 0; a < 3; ++a) {
          p.offset_bias.value[3 * s + a] = static_cast<T>(dir[a] * (k + 1));
        }
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Trilinear sampling
// ---------------------------------------------------------------------------

template <typename T>
TrilinearStencil<T> trilinear_stencil(const Dims3& dims, const std::array<T, 3>& coord) {
  const auto ad = axis_weights<T>(dims.d, coord[0]);
  const auto ah = axis_weights<T>(dims.h, coord[1]);
  const auto aw = axis_weights<T>(dims.w, coord[2]);
  TrilinearStencil<T> st;
  for (int c8 = 0; c8 < 8; ++c8) {
    const bool bd = (c8 >> 2) & 1;
    const bool bh = (c8 >> 1) & 1;
    const bool bw = c8 & 1;
    const int d = bd ? ad.hi : ad.lo;
    const int h = bh ? ah.hi : ah.lo;
    const int w = bw ? aw.hi : aw.lo;
    const T wd = bd ? ad.w_hi : ad.w_lo;
    const T wh = bh ? ah.w_hi : ah.w_lo;
    const T ww = bw ? aw.w_hi : aw.w_lo;
    st.voxel[c8] = (static_cast<std::size_t>(d) * dims.h + h) * dims.w + w;
    st.weight[c8] = wd * wh * ww;
    st.dweight[c8] = {(bd ? ad.dw_hi : ad.dw_lo) * wh * ww, wd * (bh ? ah.dw_hi : ah.dw_lo) * ww,
                      wd * wh * (bw ? aw.dw_hi : aw.dw_lo)};
  }
  return st;
}

template <typename T>
std::vector<T> trilinear_sample(const Volume<T>& level, const std::array<T, 3>& coord) {
  const auto st = trilinear_stencil(level.dims(), coord);
  std::vector<T> out(static_cast<std::size_t>(level.channels()), T{0});
  for (int c = 0; c < level.channels(); ++c) {
    auto ch = level.channel(c);
    T acc = T{0};
    for (int c8 = 0; c8 < 8; ++c8) acc += st.weight[c8] * ch[st.voxel[c8]];
    out[c] = acc;
  }
  return out;
}

template <typename T>
std::array<T, 3> trilinear_sample_backward(const Volume<T>& level, const std::array<T, 3>& coord,
                                           std::span<const T> dout, Volume<T>& dlevel) {
  if (!dlevel.same_shape(level) || dout.size() != static_cast<std::size_t>(level.channels())) {
    throw DimensionError("trilinear_sample_backward: shape mismatch");
  }
  const auto st = trilinear_stencil(level.dims(), coord);
  std::array<T, 3> dcoord{};
  for (int c = 0; c < level.channels(); ++c) {
    auto ch = level.channel(c);
    auto dch = dlevel.channel(c);
    for (int c8 = 0; c8 < 8; ++c8) {
      dch[st.voxel[c8]] += st.weight[c8] * dout[c];
      for (int a = 0; a < 3; ++a) dcoord[a] += st.dweight[c8][a] * ch[st.voxel[c8]] * dout[c];
    }
  }
  return dcoord;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

std::size_t dmsa_workspace_elements(std::size_t tokens, int channels, int heads, int levels,
                                    int points) {
  const std::size_t c = static_cast<std::size_t>(channels);
  const std::size_t s = static_cast<std::size_t>(heads) * levels * points;
  return tokens * (3 * c + 4 * s);
}

template <typename T>
std::size_t DmsaWorkspace<T>::retained_elements() const {
  return input.size() + value.size() + locations.size() + weights.size() + heads.size();
}

template <typename T>
TokenSequence<T> msdmsa_forward(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                                const DmsaParams<T>& params, DmsaWorkspace<T>* workspace) {
  check_inputs(seq, refs, params);
  const std::size_t n = seq.size();
  const int per_head = params.samples_per_head();

  Matrix<T> value = linear(seq.tokens, params.value_weight, params.value_bias);
  Matrix<T> locations = linear(seq.tokens, params.offset_weight, params.offset_bias);
  Matrix<T> weights = linear(seq.tokens, params.attn_weight, params.attn_bias);
  Matrix<T> heads(n, static_cast<std::size_t>(params.channels));

  for (std::size_t q = 0; q < n; ++q) {
    normalize_heads<T>(weights.row(q), params.heads, per_head);
    gather_query<T>(value, seq.layout, refs.at(q), params, locations.row(q), weights.row(q),
                    heads.row(q));
  }

  TokenSequence<T> out{linear(heads, params.out_weight, params.out_bias), seq.layout};
  if (workspace != nullptr) {
    workspace->valid = true;
    workspace->params = &params;
    workspace->layout = seq.layout;
    workspace->input = seq.tokens;
    workspace->value = std::move(value);
    workspace->locations = std::move(locations);
    workspace->weights = std::move(weights);
    workspace->heads = std::move(heads);
  }
  return out;
}

template <typename T>
Matrix<T> msdmsa_backward(const DmsaWorkspace<T>& ws, const Matrix<T>& dy,
                          DmsaParams<T>& params) {
  if (!ws.valid) throw StateError("msdmsa_backward: workspace holds no forward pass");
  if (ws.params != &params) {
    throw StateError("msdmsa_backward: workspace was produced with different parameters");
  }
  const std::size_t n = ws.input.rows();
  const auto c = static_cast<std::size_t>(params.channels);
  if (dy.rows() != n || dy.cols() != c || ws.value.rows() != n) {
    throw StateError("msdmsa_backward: upstream gradient does not match the stored forward");
  }
  const int ch = params.head_width();
  const int per_head = params.samples_per_head();

  Matrix<T> dheads = linear_backward(ws.heads, params.out_weight, params.out_bias, dy);
  Matrix<T> dvalue(n, c);
  Matrix<T> dloc(n, ws.locations.cols());
  Matrix<T> dlogits(n, ws.weights.cols());
  std::vector<T> dweight(static_cast<std::size_t>(per_head));

  const T* v = ws.value.data().data();
  T* dv = dvalue.data().data();
  for (std::size_t q = 0; q < n; ++q) {
    auto loc = ws.locations.row(q);
    auto w = ws.weights.row(q);
    auto dh = dheads.row(q);
    auto dl = dloc.row(q);
    for (int i = 0; i < params.heads; ++i) {
      const T* g = dh.data() + static_cast<std::size_t>(i) * ch;
      for (int l = 0; l < params.levels; ++l) {
        const Dims3 dims = ws.layout.dims(l);
        const std::size_t level_base = ws.layout.offset(l);
        for (int k = 0; k < params.points; ++k) {
          const int lk = l * params.points + k;
          const std::size_t s = static_cast<std::size_t>(i) * per_head + lk;
          const std::array<T, 3> coord{loc[3 * s], loc[3 * s + 1], loc[3 * s + 2]};
          const auto st = trilinear_stencil(dims, coord);
          T dw = T{0};
          std::array<T, 3> dcoord{};
          for (int c8 = 0; c8 < 8; ++c8) {
            const std::size_t off =
                (level_base + st.voxel[c8]) * c + static_cast<std::size_t>(i) * ch;
            T corner_dot = T{0};
            for (int cc = 0; cc < ch; ++cc) corner_dot += g[cc] * v[off + cc];
            dw += st.weight[c8] * corner_dot;
            for (int a = 0; a < 3; ++a) dcoord[a] += st.dweight[c8][a] * corner_dot;
            const T scale = w[s] * st.weight[c8];
            if (scale != T{0}) {
              for (int cc = 0; cc < ch; ++cc) dv[off + cc] += scale * g[cc];
            }
          }
          dweight[lk] = dw;
          for (int a = 0; a < 3; ++a) dl[3 * s + a] = w[s] * dcoord[a];
        }
      }
      const auto probs = w.subspan(static_cast<std::size_t>(i) * per_head, per_head);
      const auto dz = softmax_backward<T>(probs, dweight);
      std::copy(dz.begin(), dz.end(),
                dlogits.row(q).begin() + static_cast<std::ptrdiff_t>(i) * per_head);
    }
  }

  Matrix<T> dx = linear_backward(ws.input, params.value_weight, params.value_bias, dvalue);
  const Matrix<T> dx_off = linear_backward(ws.input, params.offset_weight, params.offset_bias, dloc);
  const Matrix<T> dx_attn = linear_backward(ws.input, params.attn_weight, params.attn_bias, dlogits);
  for (std::size_t i = 0; i < dx.size(); ++i) {
    dx.data()[i] += dx_off.data()[i] + dx_attn.data()[i];
  }
  return dx;
}

template <typename T>
std::vector<T> dmsa_head(const TokenSequence<T>& seq, std::size_t query,
                         const ReferencePoints<T>& refs, const DmsaParams<T>& params, int head) {
  check_inputs(seq, refs, params);
  if (query >= seq.size()) throw IndexError("dmsa_head: query out of range");
  if (head < 0 || head >= params.heads) throw IndexError("dmsa_head: head out of range");
  const Matrix<T> value = linear(seq.tokens, params.value_weight, params.value_bias);
  Matrix<T> z(1, seq.channels());
  std::copy(seq.tokens.row(query).begin(), seq.tokens.row(query).end(), z.row(0).begin());
  Matrix<T> locations = linear(z, params.offset_weight, params.offset_bias);
  Matrix<T> weights = linear(z, params.attn_weight, params.attn_bias);
  normalize_heads<T>(weights.row(0), params.heads, params.samples_per_head());
  std::vector<T> heads(seq.channels(), T{0});
  gather_query<T>(value, seq.layout, refs.at(query), params, locations.row(0), weights.row(0),
                  heads, head);
  const auto ch = static_cast<std::size_t>(params.head_width());
  return {heads.begin() + static_cast<std::ptrdiff_t>(head * ch),
          heads.begin() + static_cast<std::ptrdiff_t>((head + 1) * ch)};
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

template <typename T>
TokenSequence<T> msdmsa_oracle(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                               const DmsaParams<T>& params) {
  check_inputs(seq, refs, params);
  const std::size_t n = seq.size();
  const int c = params.channels;
  const int ch = params.head_width();
  const int lk = params.samples_per_head();
  const auto& x = seq.tokens;
  auto wv = [&](int r, int j) { return params.value_weight.value[r * c + j]; };

  TokenSequence<T> out{Matrix<T>(n, c), seq.layout};
  std::vector<T> concat(c);
  std::vector<T> logits(lk);
  for (std::size_t q = 0; q < n; ++q) {
    for (int i = 0; i < params.heads; ++i) {
      // Attention logits and their softmax for this head.
      for (int s = 0; s < lk; ++s) {
        const int row = i * lk + s;
        T acc = params.attn_bias.value[row];
        for (int j = 0; j < c; ++j) acc += params.attn_weight.value[row * c + j] * x(q, j);
        logits[s] = acc;
      }
      T peak = logits[0];
      for (int s = 1; s < lk; ++s) peak = std::max(peak, logits[s]);
      T denom = T{0};
      for (int s = 0; s < lk; ++s) denom += std::exp(logits[s] - peak);

      for (int cc = 0; cc < ch; ++cc) concat[i * ch + cc] = T{0};
      for (int l = 0; l < params.levels; ++l) {
        const Dims3 g = seq.layout.dims(l);
        const int extent[3] = {g.d, g.h, g.w};
        for (int k = 0; k < params.points; ++k) {
          const int s = l * params.points + k;
          const T weight = std::exp(logits[s] - peak) / denom;
          // Location: anchor on the level grid plus the projected offset.
          T pos[3];
          for (int a = 0; a < 3; ++a) {
            const int row = (i * lk + s) * 3 + a;
            T off = params.offset_bias.value[row];
            for (int j = 0; j < c; ++j) off += params.offset_weight.value[row * c + j] * x(q, j);
            pos[a] = refs.coords(q, a) * static_cast<T>(extent[a]) - T(0.5) + off;
          }
          // Eight corners with border clamping.
          int lo[3];
          int hi[3];
          T frac[3];
          for (int a = 0; a < 3; ++a) {
            const T clamped = std::min(std::max(pos[a], T{0}), static_cast<T>(extent[a] - 1));
            lo[a] = static_cast<int>(std::floor(clamped));
            if (lo[a] > extent[a] - 2) lo[a] = std::max(extent[a] - 2, 0);
            hi[a] = std::min(lo[a] + 1, extent[a] - 1);
            frac[a] = extent[a] == 1 ? T{0} : clamped - static_cast<T>(lo[a]);
          }
          for (int bd = 0; bd < 2; ++bd) {
            for (int bh = 0; bh < 2; ++bh) {
              for (int bw = 0; bw < 2; ++bw) {
                const T tw = (bd ? frac[0] : T{1} - frac[0]) * (bh ? frac[1] : T{1} - frac[1]) *
                             (bw ? frac[2] : T{1} - frac[2]);
                const int d = bd ? hi[0] : lo[0];
                const int h = bh ? hi[1] : lo[1];
                const int w = bw ? hi[2] : lo[2];
                const std::size_t token = seq.layout.token(l, d, h, w);
                for (int cc = 0; cc < ch; ++cc) {
                  const int r = i * ch + cc;
                  T projected = params.value_bias.value[r];
                  for (int j = 0; j < c; ++j) projected += wv(r, j) * x(token, j);
                  concat[r] += weight * tw * projected;
                }
              }
            }
          }
        }
      }
    }
    for (int r = 0; r < c; ++r) {
      T acc = params.out_bias.value[r];
      for (int j = 0; j < c; ++j) acc += params.out_weight.value[r * c + j] * concat[j];
      out.tokens(q, r) = acc;
    }
  }
  return out;
}

template <typename T>
std::vector<SampledPoint> sampled_points(const DmsaWorkspace<T>& ws, std::size_t query) {
  if (!ws.valid || ws.params == nullptr) throw StateError("sampled_points: empty workspace");
  if (query >= ws.weights.rows()) throw IndexError("sampled_points: query out of range");
  const auto& p = *ws.params;
  std::vector<SampledPoint> points;
  for (int i = 0; i < p.heads; ++i) {
    for (int l = 0; l < p.levels; ++l) {
      for (int k = 0; k < p.points; ++k) {
        const std::size_t s = (static_cast<std::size_t>(i) * p.levels + l) * p.points + k;
        points.push_back({i, l, k,
                          {static_cast<double>(ws.locations(query, 3 * s)),
                           static_cast<double>(ws.locations(query, 3 * s + 1)),
                           static_cast<double>(ws.locations(query, 3 * s + 2))},
                          static_cast<double>(ws.weights(query, s))});
      }
    }
  }
  return points;
}

#define COTR_INSTANTIATE_DMSA(T)                                                                 \
  template struct DmsaParams<T>;                                                                 \
  template struct DmsaWorkspace<T>;                                                              \
  template DmsaParams<T> init_dmsa_params(int, int, int, int, Rng&);                             \
  template TrilinearStencil<T> trilinear_stencil(const Dims3&, const std::array<T, 3>&);         \
  template std::vector<T> trilinear_sample(const Volume<T>&, const std::array<T, 3>&);           \
  template std::array<T, 3> trilinear_sample_backward(const Volume<T>&, const std::array<T, 3>&, \
                                                      std::span<const T>, Volume<T>&);           \
  template TokenSequence<T> msdmsa_forward(const TokenSequence<T>&, const ReferencePoints<T>&,   \
                                           const DmsaParams<T>&, DmsaWorkspace<T>*);             \
  template Matrix<T> msdmsa_backward(const DmsaWorkspace<T>&, const Matrix<T>&, DmsaParams<T>&); \
  template TokenSequence<T> msdmsa_oracle(const TokenSequence<T>&, const ReferencePoints<T>&,    \
                                          const DmsaParams<T>&);                                 \
  template std::vector<T> dmsa_head(const TokenSequence<T>&, std::size_t,                        \
                                    const ReferencePoints<T>&, const DmsaParams<T>&, int);       \
  template std::vector<SampledPoint> sampled_points(const DmsaWorkspace<T>&, std::size_t);

COTR_INSTANTIATE_DMSA(float)
COTR_INSTANTIATE_DMSA(double)

}  // namespace cotr
