// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-scale deformable self-attention over a flattened 3D feature pyramid.
//
// For query q with normalized anchor p_q, head i gathers
//
//   head_i = sum_l sum_k w_ilqk * V_l(rescale_l(p_q) + offset_ilqk)
//
// where V_l is the value-projected level-l grid restricted to the head's
// channel slice, offsets come from a linear map of z_q (voxel units of the
// target level), and w_ilqk is a softmax over the L*K logits of head i. Heads
// are concatenated and mixed by the output projection.
//
// Index conventions: offset columns are ((i * L + l) * K + k) * 3 + axis with
// axis order (d, h, w); attention columns are (i * L + l) * K + k.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cotr/random.hpp"
#include "cotr/sequence.hpp"

namespace cotr {

template <typename T>
struct DmsaParams {
  int channels = 0;
  int heads = 1;
  int levels = 1;
  int points = 1;

  Param<T> value_weight;   // C x C
  Param<T> value_bias;     // C
  Param<T> offset_weight;  // (H L K 3) x C
  Param<T> offset_bias;
  Param<T> attn_weight;    // (H L K) x C
  Param<T> attn_bias;
  Param<T> out_weight;     // C x C
  Param<T> out_bias;

  /// All-zero parameters of the right shapes.
  static DmsaParams zeros(int channels, int heads, int levels, int points);

  int head_width() const { return channels / heads; }
  int samples_per_head() const { return levels * points; }
  int sample_count() const { return heads * levels * points; }
  void validate() const;

  template <typename F>
  void visit(F&& f) {
    f("value_weight", value_weight);
    f("value_bias", value_bias);
    f("offset_weight", offset_weight);
    f("offset_bias", offset_bias);
    f("attn_weight", attn_weight);
    f("attn_bias", attn_bias);
    f("out_weight", out_weight);
    f("out_bias", out_bias);
  }
};

/// Training initialization: Xavier-uniform value/output maps, zero offset and
/// attention weights, offset biases along per-head unit directions scaled by
/// (k + 1), zero attention biases (uniform attention).
template <typename T>
DmsaParams<T> init_dmsa_params(int channels, int heads, int levels, int points, Rng& rng);

/// Unit direction assigned to head i for the offset-bias initialization.
std::array<double, 3> head_direction(int head);

// ---------------------------------------------------------------------------
// Trilinear sampling
// ---------------------------------------------------------------------------

/// Corner voxels, weights and weight derivatives for one continuous
/// coordinate. Coordinates are clamped to [0, n - 1] per axis (border
/// replication); the derivative of a clamped axis is zero.
template <typename T>
struct TrilinearStencil {
  std::array<std::size_t, 8> voxel{};  // linear spatial index
  std::array<T, 8> weight{};
  std::array<std::array<T, 3>, 8> dweight{};  // d weight / d coord
};

template <typename T>
TrilinearStencil<T> trilinear_stencil(const Dims3& dims, const std::array<T, 3>& coord);

template <typename T>
std::vector<T> trilinear_sample(const Volume<T>& level, const std::array<T, 3>& coord);

/// Accumulates the gradient into `dlevel` and returns d/dcoord.
template <typename T>
std::array<T, 3> trilinear_sample_backward(const Volume<T>& level, const std::array<T, 3>& coord,
                                           std::span<const T> dout, Volume<T>& dlevel);

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// State retained by the forward pass for the backward pass.
template <typename T>
struct DmsaWorkspace {
  bool valid = false;
  const DmsaParams<T>* params = nullptr;
  LevelLayout layout;
  Matrix<T> input;      // N x C
  Matrix<T> value;      // N x C, value-projected tokens
  Matrix<T> locations;  // N x (H L K 3), continuous sampling coordinates
  Matrix<T> weights;    // N x (H L K), softmax-normalized attention
  Matrix<T> heads;      // N x C, concatenated head outputs

  std::size_t retained_elements() const;
};

/// Elements a workspace holds for N tokens (matches retained_elements()).
std::size_t dmsa_workspace_elements(std::size_t tokens, int channels, int heads, int levels,
                                    int points);

template <typename T>
TokenSequence<T> msdmsa_forward(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                                const DmsaParams<T>& params,
                                DmsaWorkspace<T>* workspace = nullptr);

/// Returns d/dseq and accumulates every parameter gradient. Throws StateError
/// when the workspace does not come from a forward pass with these params.
template <typename T>
Matrix<T> msdmsa_backward(const DmsaWorkspace<T>& workspace, const Matrix<T>& dy,
                          DmsaParams<T>& params);

/// Direct loop evaluation: projects corner voxels on the fly, no workspace.
template <typename T>
TokenSequence<T> msdmsa_oracle(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                               const DmsaParams<T>& params);

/// One head for one query (width C / H).
template <typename T>
std::vector<T> dmsa_head(const TokenSequence<T>& seq, std::size_t query,
                         const ReferencePoints<T>& refs, const DmsaParams<T>& params, int head);

struct SampledPoint {
  int head;
  int level;
  int point;
  std::array<double, 3> coord;
  double weight;
};

template <typename T>
std::vector<SampledPoint> sampled_points(const DmsaWorkspace<T>& workspace, std::size_t query);

}  // namespace cotr
