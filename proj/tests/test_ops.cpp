// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cotr/ops.hpp"
#include "test_util.hpp"

using namespace cotr;
using cotr::test_util::max_abs_diff;
using cotr::test_util::random_matrix;
using cotr::test_util::random_volume;

namespace {

Matrix<double> naive_matmul(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += (long double)a(i, k) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

// Direct 7-loop convolution with zero padding.
Volume<double> naive_conv(const Volume<double>& x, const std::vector<double>& w,
                          const std::vector<double>& b, const ConvGeometry& g) {
  const Dims3 in = x.dims();
  const Dims3 out = g.conv_output(in);
  Volume<double> y(g.out_channels, out);
  for (int o = 0; o < g.out_channels; ++o)
    for (int od = 0; od < out.d; ++od)
      for (int oh = 0; oh < out.h; ++oh)
        for (int ow = 0; ow < out.w; ++ow) {
          double s = b.empty() ? 0.0 : b[o];
          for (int c = 0; c < g.in_channels; ++c)
            for (int kd = 0; kd < g.kernel.d; ++kd)
              for (int kh = 0; kh < g.kernel.h; ++kh)
                for (int kw = 0; kw < g.kernel.w; ++kw) {
                  const int d = od * g.stride.d - g.padding.d + kd;
                  const int h = oh * g.stride.h - g.padding.h + kh;
                  const int ww = ow * g.stride.w - g.padding.w + kw;
                  if (d < 0 || h < 0 || ww < 0 || d >= in.d || h >= in.h || ww >= in.w) continue;
                  const std::size_t wi =
                      (((static_cast<std::size_t>(o) * g.in_channels + c) * g.kernel.d + kd) *
                           g.kernel.h + kh) * g.kernel.w + kw;
                  s += w[wi] * x.at(c, d, h, ww);
                }
          y.at(o, od, oh, ow) = s;
        }
  return y;
}

double vdot(const Volume<double>& a, const Volume<double>& b) {
  return dot<double>(a.data(), b.data());
}

}  // namespace

// --- matmul / linear -------------------------------------------------------

TEST(Matmul, IdentityAndHandCase) {
  Matrix<double> a(2, 2, {1, 2, 3, 4});
  Matrix<double> eye(2, 2, {1, 0, 0, 1});
  EXPECT_EQ(matmul(a, eye), a);
  Matrix<double> b(2, 1, {5, 6});
  const auto c = matmul(a, b);
  EXPECT_EQ(c(0, 0), 17.0);
  EXPECT_EQ(c(1, 0), 39.0);
}

TEST(Matmul, MatchesNaiveProduct) {
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const std::size_t m = 1 + rng.index(9), k = 1 + rng.index(9), n = 1 + rng.index(9);
    const auto a = random_matrix<double>(m, k, rng);
    const auto b = random_matrix<double>(k, n, rng);
    const auto got = matmul(a, b);
    EXPECT_LT(max_abs_diff(got.data(), naive_matmul(a, b).data()), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix<double>(2, 3), Matrix<double>(2, 3)), DimensionError);
}

TEST(Linear, AppliesTransposedWeightPlusBias) {
  Param<double> w({2, 3});
  w.value = {1, 0, 0, 0, 1, 1};
  Param<double> b({2});
  b.value = {10, 20};
  Matrix<double> x(1, 3, {1, 2, 3});
  const auto y = linear(x, w, b);
  EXPECT_EQ(y(0, 0), 11.0);
  EXPECT_EQ(y(0, 1), 25.0);
}

// --- softmax ---------------------------------------------------------------

TEST(Softmax, UniformAndSaturated) {
  std::vector<double> z(4, 3.0);
  for (double p : softmax<double>(z)) EXPECT_DOUBLE_EQ(p, 0.25);
  std::vector<double> big{1000.0, 0.0};
  const auto p = softmax<double>(big);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_GE(p[1], 0.0);
  EXPECT_LT(p[1], 1e-300);
}

TEST(Softmax, MatchesLongDoubleEvaluation) {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> z(1 + rng.index(30));
    rng.fill_normal<double>(z, 0.0, 5.0);
    const auto p = softmax<double>(z);
    long double m = z[0];
    for (double v : z) m = std::max<long double>(m, v);
    long double s = 0;
    for (double v : z) s += std::exp((long double)v - m);
    for (std::size_t i = 0; i < z.size(); ++i) {
      EXPECT_NEAR(p[i], static_cast<double>(std::exp((long double)z[i] - m) / s), 1e-14);
    }
  }
}

TEST(Softmax, SumsToOneProperty) {
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    std::vector<float> z(1 + rng.index(64));
    rng.fill_normal<float>(z, 0.0, 20.0);
    const auto p = softmax<float>(z);
    double s = 0.0;
    for (float v : p) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

// --- layer norm ------------------------------------------------------------

TEST(LayerNorm, ConstantInputGivesBias) {
  std::vector<double> x(6, 4.2), g(6, 3.0), b{1, 2, 3, 4, 5, 6};
  const auto y = layer_norm<double>(x, g, b);
  for (int i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y[i], b[i]);
}

TEST(LayerNorm, TwoValueHandCase) {
  std::vector<double> x{1.0, -1.0}, g(2, 1.0), b(2, 0.0);
  const auto y = layer_norm<double>(x, g, b);
  const double expect = 1.0 / std::sqrt(1.0 + kNormEps);
  EXPECT_NEAR(y[0], expect, 1e-15);
  EXPECT_NEAR(y[1], -expect, 1e-15);
}

TEST(LayerNorm, OutputStatistics) {
  Rng rng(5);
  std::vector<double> x(384), g(384, 1.0), b(384, 0.0);
  rng.fill_normal<double>(x, 3.0, 7.0);
  const auto y = layer_norm<double>(x, g, b);
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / 384.0;
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean) / 384.0;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(LayerNorm, RejectsNonPositiveEps) {
  std::vector<double> x(2), g(2), b(2);
  EXPECT_THROW(layer_norm<double>(x, g, b, 0.0), ConfigError);
}

// --- conv3d ----------------------------------------------------------------

TEST(Conv3d, OneByOneIdentity) {
  Rng rng(1);
  const auto x = random_volume<double>(3, {2, 3, 4}, rng);
  ConvGeometry g{3, 3, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}};
  std::vector<double> w(9, 0.0);
  for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
  const auto y = conv3d<double>(x, w, {}, g);
  EXPECT_EQ(max_abs_diff(y.data(), x.data()), 0.0);
}

TEST(Conv3d, AllOnesKernelCountsNeighbours) {
  Volume<double> x(1, {3, 3, 3}, 1.0);
  ConvGeometry g{1, 1, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}};
  std::vector<double> w(27, 1.0);
  const auto y = conv3d<double>(x, w, {}, g);
  EXPECT_EQ(y.at(0, 1, 1, 1), 27.0);
  EXPECT_EQ(y.at(0, 0, 0, 0), 8.0);
  EXPECT_EQ(y.at(0, 0, 1, 1), 18.0);
  EXPECT_EQ(y.at(0, 0, 0, 1), 12.0);
}

TEST(Conv3d, MatchesNaiveLoops) {
  Rng rng(21);
  const std::vector<ConvGeometry> geos = {
      {2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}},
      {3, 2, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}},
      {2, 4, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}},
      {1, 2, {2, 2, 1}, {2, 1, 1}, {0, 0, 0}},
  };
  for (const auto& g : geos) {
    const auto x = random_volume<double>(g.in_channels, {4, 5, 6}, rng);
    std::vector<double> w(g.weight_size()), b(g.out_channels);
    rng.fill_normal<double>(w, 0.0, 1.0);
    rng.fill_normal<double>(b, 0.0, 1.0);
    const auto y = conv3d<double>(x, w, b, g);
    const auto ref = naive_conv(x, w, b, g);
    ASSERT_TRUE(y.same_shape(ref));
    EXPECT_LT(max_abs_diff(y.data(), ref.data()), 1e-10);
  }
}

TEST(Conv3d, OutputDimsFormula) {
  ConvGeometry g{1, 1, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}};
  EXPECT_EQ(g.conv_output({8, 7, 5}), (Dims3{4, 4, 3}));
  ConvGeometry t{1, 1, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}};
  EXPECT_EQ(t.transposed_output({3, 4, 5}), (Dims3{6, 8, 10}));
}

TEST(Conv3d, Errors) {
  Volume<double> x(1, {2, 2, 2});
  ConvGeometry big{1, 1, {3, 3, 3}, {1, 1, 1}, {0, 0, 0}};
  std::vector<double> w(27);
  EXPECT_THROW(conv3d<double>(x, w, {}, big), DimensionError);
  ConvGeometry g{2, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}};
  std::vector<double> w2(2);
  EXPECT_THROW(conv3d<double>(x, w2, {}, g), DimensionError);  // channel mismatch
  ConvGeometry z{1, 1, {1, 1, 1}, {0, 1, 1}, {0, 0, 0}};
  EXPECT_THROW(z.validate(), DimensionError);
}

// --- transposed conv -------------------------------------------------------

TEST(TransposedConv3d, IdentityKernel) {
  Rng rng(2);
  const auto x = random_volume<double>(2, {2, 2, 3}, rng);
  ConvGeometry g{2, 2, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}};
  std::vector<double> w{1, 0, 0, 1};
  const auto y = transposed_conv3d<double>(x, w, {}, g);
  EXPECT_EQ(max_abs_diff(y.data(), x.data()), 0.0);
}

TEST(TransposedConv3d, StrideTwoCopiesIntoBlocks) {
  Volume<double> x(1, {1, 1, 2});
  x.data()[0] = 3.0;
  x.data()[1] = -1.0;
  ConvGeometry g{1, 1, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}};
  std::vector<double> w(8, 1.0);
  std::vector<double> b{0.5};
  const auto y = transposed_conv3d<double>(x, w, b, g);
  ASSERT_EQ(y.dims(), (Dims3{2, 2, 4}));
  for (int d = 0; d < 2; ++d)
    for (int h = 0; h < 2; ++h) {
      EXPECT_EQ(y.at(0, d, h, 0), 3.5);
      EXPECT_EQ(y.at(0, d, h, 1), 3.5);
      EXPECT_EQ(y.at(0, d, h, 2), -0.5);
      EXPECT_EQ(y.at(0, d, h, 3), -0.5);
    }
}

// <conv(x), y> == <x, conv^T(y)> for the geometries the toy network uses.
TEST(TransposedConv3d, AdjointOfConv) {
  Rng rng(31);
  struct Case {
    ConvGeometry conv;
    Dims3 in;
  };
  const std::vector<Case> cases = {
      {{4, 6, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}}, {4, 6, 6}},
      {{3, 5, {1, 2, 2}, {1, 2, 2}, {0, 0, 0}}, {2, 4, 4}},
      {{2, 3, {3, 3, 3}, {2, 2, 2}, {1, 1, 1}}, {5, 5, 5}},
  };
  for (const auto& c : cases) {
    const ConvGeometry& g = c.conv;
    std::vector<double> w(g.weight_size());
    rng.fill_normal<double>(w, 0.0, 1.0);
    const auto x = random_volume<double>(g.in_channels, c.in, rng);
    const auto y = random_volume<double>(g.out_channels, g.conv_output(c.in), rng);
    ConvGeometry t = g;
    std::swap(t.in_channels, t.out_channels);
    const auto ty = transposed_conv3d<double>(y, w, {}, t);
    // The transposed output may be shorter than x when the stride drops a
    // trailing voxel; compare over the shared extent.
    double rhs = 0.0;
    for (int ch = 0; ch < g.in_channels; ++ch)
      for (int d = 0; d < std::min(c.in.d, ty.dims().d); ++d)
        for (int h = 0; h < std::min(c.in.h, ty.dims().h); ++h)
          for (int ww = 0; ww < std::min(c.in.w, ty.dims().w); ++ww)
            rhs += x.at(ch, d, h, ww) * ty.at(ch, d, h, ww);
    const double lhs = vdot(conv3d<double>(x, w, {}, g), y);
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

// --- instance norm, relu ---------------------------------------------------

TEST(InstanceNorm, ConstantChannelGivesBias) {
  Volume<double> x(2, {2, 2, 2}, 5.0);
  std::vector<double> g{2.0, 3.0}, b{-1.0, 0.5};
  const auto y = instance_norm<double>(x, g, b);
  for (double v : y.channel(0)) EXPECT_DOUBLE_EQ(v, -1.0);
  for (double v : y.channel(1)) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(InstanceNorm, SymmetricPair) {
  Volume<double> x(1, {1, 1, 2});
  x.data()[0] = -3.0;
  x.data()[1] = 3.0;
  std::vector<double> g{1.0}, b{0.0};
  const auto y = instance_norm<double>(x, g, b);
  const double expect = 3.0 / std::sqrt(9.0 + kNormEps);
  EXPECT_NEAR(y.data()[0], -expect, 1e-15);
  EXPECT_NEAR(y.data()[1], expect, 1e-15);
}

TEST(InstanceNorm, PerChannelStatistics) {
  Rng rng(8);
  auto x = random_volume<double>(3, {4, 4, 4}, rng, 4.0);
  std::vector<double> g(3, 1.0), b(3, 0.0);
  const auto y = instance_norm<double>(x, g, b);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (double e : y.channel(c)) m += e / 64.0;
    for (double e : y.channel(c)) v += (e - m) * (e - m) / 64.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Relu, ForwardAndBackward) {
  Volume<double> x(1, {1, 1, 4});
  x.data()[0] = -1.0;
  x.data()[1] = 0.0;
  x.data()[2] = 2.0;
  x.data()[3] = -0.5;
  const auto y = relu(x);
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_EQ(y.data()[2], 2.0);
  Volume<double> dy(1, {1, 1, 4}, 1.0);
  const auto dx = relu_backward(y, dy);
  EXPECT_EQ(dx.data()[0], 0.0);
  EXPECT_EQ(dx.data()[1], 0.0);
  EXPECT_EQ(dx.data()[2], 1.0);
  EXPECT_EQ(dx.data()[3], 0.0);
}

// --- upsampling ------------------------------------------------------------

TEST(Upsample, HandValuesAlongWidth) {
  Volume<double> x(1, {1, 1, 2});
  x.data()[0] = 0.0;
  x.data()[1] = 1.0;
  const auto y = upsample_linear(x, {1, 1, 2});
  ASSERT_EQ(y.dims(), (Dims3{1, 1, 4}));
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.25);
  EXPECT_DOUBLE_EQ(y.data()[2], 0.75);
  EXPECT_DOUBLE_EQ(y.data()[3], 1.0);
}

TEST(Upsample, PreservesConstants) {
  Volume<double> x(2, {2, 3, 3}, 1.5);
  const auto y = upsample_linear(x, {1, 2, 2});
  EXPECT_EQ(y.dims(), (Dims3{2, 6, 6}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(Upsample, BackwardIsAdjoint) {
  Rng rng(17);
  const Dims3 in{2, 3, 5};
  const Dims3 f{2, 2, 3};
  const auto x = random_volume<double>(2, in, rng);
  const auto up = upsample_linear(x, f);
  const auto dy = random_volume<double>(2, up.dims(), rng);
  const auto dx = upsample_linear_backward(in, f, dy);
  EXPECT_NEAR(vdot(up, dy), vdot(x, dx), 1e-12);
}

TEST(Ops, Deterministic) {
  Rng a(4), b(4);
  const auto x1 = random_volume<double>(2, {3, 4, 4}, a);
  const auto x2 = random_volume<double>(2, {3, 4, 4}, b);
  ConvGeometry g{2, 3, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}};
  std::vector<double> w(g.weight_size(), 0.1);
  const auto y1 = conv3d<double>(x1, w, {}, g);
  const auto y2 = conv3d<double>(x2, w, {}, g);
  EXPECT_EQ(max_abs_diff(y1.data(), y2.data()), 0.0);
}
