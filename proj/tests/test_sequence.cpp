// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "cotr/sequence.hpp"
#include "test_util.hpp"

using namespace cotr;

TEST(LevelLayout, OffsetsAndLocate) {
  LevelLayout layout({{2, 3, 4}, {1, 2, 2}});
  EXPECT_EQ(layout.total(), 28u);
  EXPECT_EQ(layout.offset(1), 24u);
  const auto p = layout.locate(25);
  EXPECT_EQ(p.level, 1u);
  EXPECT_EQ(p.d, 0);
  EXPECT_EQ(p.h, 0);
  EXPECT_EQ(p.w, 1);
  EXPECT_EQ(layout.token(0, 1, 2, 3), 23u);
  for (std::size_t t = 0; t < layout.total(); ++t) {
    const auto q = layout.locate(t);
    EXPECT_EQ(layout.token(q.level, q.d, q.h, q.w), t);
  }
  EXPECT_THROW(layout.locate(28), IndexError);
}

TEST(LevelLayout, Errors) {
  EXPECT_THROW(LevelLayout(std::vector<Dims3>{}), DimensionError);
  EXPECT_THROW(LevelLayout({{1, 0, 1}}), DimensionError);
}

TEST(Flatten, RoundTripIsBitwise) {
  Rng rng(9);
  std::vector<Volume<double>> levels = {test_util::random_volume<double>(5, {4, 4, 4}, rng),
                                        test_util::random_volume<double>(5, {2, 2, 2}, rng),
                                        test_util::random_volume<double>(5, {1, 1, 3}, rng)};
  const auto seq = flatten_levels(levels);
  EXPECT_EQ(seq.size(), 64u + 8u + 3u);
  EXPECT_EQ(seq.channels(), 5u);
  // Token (level 1, d=1, h=0, w=1) holds the channel vector of that voxel.
  const std::size_t t = seq.layout.token(1, 1, 0, 1);
  for (int c = 0; c < 5; ++c) EXPECT_EQ(seq.tokens(t, c), levels[1].at(c, 1, 0, 1));
  const auto back = unflatten(seq);
  ASSERT_EQ(back.size(), levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    ASSERT_TRUE(back[l].same_shape(levels[l]));
    EXPECT_EQ(std::memcmp(back[l].data().data(), levels[l].data().data(),
                          levels[l].size() * sizeof(double)),
              0);
  }
}

TEST(Flatten, ChannelMismatchThrows) {
  std::vector<Volume<float>> levels = {Volume<float>(2, {1, 1, 1}), Volume<float>(3, {1, 1, 1})};
  EXPECT_THROW(flatten_levels(levels), DimensionError);
}

TEST(ReferencePoints, VoxelCentresRescaleToIntegers) {
  LevelLayout layout({{4, 6, 8}, {2, 3, 4}, {1, 1, 2}});
  const auto refs = reference_points<double>(layout);
  ASSERT_EQ(refs.size(), layout.total());
  for (std::size_t t = 0; t < layout.total(); ++t) {
    const auto pos = layout.locate(t);
    const auto p = refs.at(t);
    for (double v : p) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
    const auto g = rescale(p, layout.dims(pos.level));
    EXPECT_NEAR(g[0], pos.d, 1e-12);
    EXPECT_NEAR(g[1], pos.h, 1e-12);
    EXPECT_NEAR(g[2], pos.w, 1e-12);
  }
}

TEST(ReferencePoints, CrossLevelRescale) {
  // The centre of a 2-wide grid maps between the two middle voxels of a
  // 4-wide grid.
  const std::array<double, 3> p{0.5, 0.5, 0.25};
  const auto g = rescale(p, Dims3{4, 2, 4});
  EXPECT_DOUBLE_EQ(g[0], 1.5);
  EXPECT_DOUBLE_EQ(g[1], 0.5);
  EXPECT_DOUBLE_EQ(g[2], 0.5);
}
