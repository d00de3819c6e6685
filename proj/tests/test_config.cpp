// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "cotr/config_file.hpp"

using namespace cotr;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_toy_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(ConfigFile, ParsesKeysCommentsAndBlankLines) {
  const auto c = parse_toy_config(
      "# toy run\n"
      "\n"
      "input = 8, 32, 32\n"
      "heads = 3   # three heads\n"
      "points=2\n"
      "ds_weights = 0.5, 0.25, 0.25\n"
      "multi_scale = false\n"
      "lr_schedule = constant\n"
      "seed = 18446744073709551615\n");
  EXPECT_EQ(c.input, (Dims3{8, 32, 32}));
  EXPECT_EQ(c.heads, 3);
  EXPECT_EQ(c.points, 2);
  ASSERT_EQ(c.ds_weights.size(), 3u);
  EXPECT_EQ(c.ds_weights[1], 0.25);
  EXPECT_FALSE(c.multi_scale);
  EXPECT_EQ(c.lr_schedule, LrSchedule::constant);
  EXPECT_EQ(c.seed, 18446744073709551615ULL);
  EXPECT_EQ(c.base_channels, ToyConfig{}.base_channels);
}

TEST(ConfigFile, UnknownKeyNamesLine) {
  EXPECT_EQ(error_of("heads = 2\n\ncolour = blue\n"), "config line 3: unknown key 'colour'");
}

TEST(ConfigFile, DuplicateKey) {
  EXPECT_NE(error_of("heads = 2\nheads = 3\n").find("config line 2: duplicate key 'heads'"),
            std::string::npos);
}

TEST(ConfigFile, MalformedLinesAndValues) {
  EXPECT_NE(error_of("heads\n").find("config line 1"), std::string::npos);
  EXPECT_NE(error_of("heads = two\n").find("config line 1: heads: expected an integer"),
            std::string::npos);
  EXPECT_NE(error_of("input = 1,2\n").find("expected D,H,W"), std::string::npos);
  EXPECT_NE(error_of("multi_scale = maybe\n").find("expected true/false"), std::string::npos);
  EXPECT_NE(error_of("seed = -1\n").find("non-negative"), std::string::npos);
  EXPECT_NE(error_of("lr_schedule = cosine\n").find("poly or constant"), std::string::npos);
  EXPECT_FALSE(error_of(" = 3\n").empty());
}

TEST(ConfigFile, ValidatesResult) {
  EXPECT_NE(error_of("token_channels = 10\n").find("multiple of 6"), std::string::npos);
}

TEST(ConfigFile, FormatRoundTrips) {
  ToyConfig c;
  c.input = {8, 16, 32};
  c.heads = 3;
  c.learning_rate = 0.1 / 3.0;
  c.ds_weights = {0.7, 0.2, 0.1};
  c.multi_scale = false;
  c.seed = 99;
  c.noise = 0.123456789012345;
  c.lr_schedule = LrSchedule::constant;
  const auto back = parse_toy_config(format_toy_config(c));
  EXPECT_EQ(format_toy_config(back), format_toy_config(c));
  EXPECT_EQ(back.learning_rate, c.learning_rate);
  EXPECT_EQ(back.ds_weights, c.ds_weights);
  EXPECT_EQ(back.noise, c.noise);
  // Every key is written.
  const auto text = format_toy_config(c);
  for (const auto& key : toy_config_keys()) {
    EXPECT_NE(text.find(key + " = "), std::string::npos) << key;
  }
}

TEST(ConfigFile, MissingFile) {
  EXPECT_THROW(load_toy_config("/nonexistent/dir/config.txt"), ConfigError);
}

TEST(ConfigFile, ScalarParsers) {
  EXPECT_EQ(parse_int(" 42 ", "n"), 42);
  EXPECT_THROW(parse_int("4.5", "n"), ConfigError);
  EXPECT_THROW(parse_int("", "n"), ConfigError);
  EXPECT_DOUBLE_EQ(parse_double("1e-3", "x"), 1e-3);
  EXPECT_THROW(parse_double("1e-3x", "x"), ConfigError);
  EXPECT_TRUE(parse_bool("yes", "b"));
  EXPECT_EQ(split_list("a, b,,c "), (std::vector<std::string>{"a", "b", "c"}));
}
