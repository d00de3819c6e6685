// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cotr/tensor.hpp"

using namespace cotr;

TEST(Tensor, VolumeIndexingIsRowMajor) {
  Volume<double> v(2, {3, 4, 5});
  EXPECT_EQ(v.size(), 120u);
  EXPECT_EQ(v.spatial(), 60u);
  EXPECT_EQ(v.index(0, 0, 0, 1), 1u);
  EXPECT_EQ(v.index(0, 0, 1, 0), 5u);
  EXPECT_EQ(v.index(0, 1, 0, 0), 20u);
  EXPECT_EQ(v.index(1, 0, 0, 0), 60u);
  v.at(1, 2, 3, 4) = 7.0;
  EXPECT_EQ(v.data().back(), 7.0);
  EXPECT_EQ(v.channel(1).back(), 7.0);
}

TEST(Tensor, VolumeRejectsEmptyShapes) {
  EXPECT_THROW(Volume<float>(0, {1, 1, 1}), DimensionError);
  EXPECT_THROW(Volume<float>(1, {1, 0, 1}), DimensionError);
  EXPECT_THROW(Volume<float>(1, {1, 1, -2}), DimensionError);
}

TEST(Tensor, MatrixFromData) {
  Matrix<double> m(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 0), 4.0);
  EXPECT_EQ(m.row(1)[2], 6.0);
  EXPECT_THROW(Matrix<double>(2, 3, {1, 2, 3}), DimensionError);
}

TEST(Tensor, ParamShapeAndZeroGrad) {
  Param<double> p({4, 3}, 2.0);
  EXPECT_EQ(p.size(), 12u);
  EXPECT_EQ(p.rows(), 4u);
  EXPECT_EQ(p.cols(), 3u);
  p.grad[5] = 1.0;
  p.zero_grad();
  for (double g : p.grad) EXPECT_EQ(g, 0.0);
  for (double v : p.value) EXPECT_EQ(v, 2.0);
}

TEST(Tensor, CastRoundTripsRepresentableValues) {
  Volume<double> v(1, {1, 2, 2});
  v.data()[0] = 0.5;
  v.data()[1] = -3.25;
  v.data()[2] = 1024.0;
  v.data()[3] = 0.0;
  const auto f = cast_volume<float>(v);
  const auto back = cast_volume<double>(f);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(back.data()[i], v.data()[i]);
}

TEST(Tensor, AllFinite) {
  std::vector<double> ok{1.0, -2.0, 0.0};
  EXPECT_TRUE(all_finite<double>(ok));
  std::vector<double> nan{1.0, std::numeric_limits<double>::quiet_NaN()};
  EXPECT_FALSE(all_finite<double>(nan));
  std::vector<float> inf{std::numeric_limits<float>::infinity()};
  EXPECT_FALSE(all_finite<float>(inf));
}

TEST(Tensor, DimsToString) {
  EXPECT_EQ(to_string(Dims3{2, 3, 4}), "(2,3,4)");
}
