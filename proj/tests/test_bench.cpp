// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "cotr/bench.hpp"
#include "cotr/msdmsa.hpp"
#include "cotr/vanilla_attention.hpp"

using namespace cotr;

TEST(BenchLayout, HoldsExactlyNTokens) {
  for (std::size_t n : {512u, 1000u, 1024u, 4096u, 777u})
    for (int levels : {1, 2, 3, 4}) {
      const auto layout = bench_layout(n, levels);
      EXPECT_EQ(layout.total(), n);
      EXPECT_EQ(layout.levels(), static_cast<std::size_t>(levels));
    }
}

TEST(BenchLayout, HalvingPyramid) {
  const auto layout = bench_layout(4096, 3);
  EXPECT_EQ(layout.size(0), 2048u);
  EXPECT_EQ(layout.size(1), 1024u);
  EXPECT_EQ(layout.size(2), 1024u);
  EXPECT_EQ(layout.dims(0), (Dims3{8, 16, 16}));
  EXPECT_EQ(bench_layout(24, 1).dims(0), (Dims3{1, 1, 24}));
  EXPECT_THROW(bench_layout(2, 3), ConfigError);
  EXPECT_THROW(bench_layout(16, 0), ConfigError);
}

TEST(BenchWorkspace, MatchesAnalyticCounts) {
  BenchConfig c;
  EXPECT_EQ(bench_workspace_bytes("vanilla", 100, c, 8),
            vanilla_workspace_elements(100, 96, 6) * 8);
  EXPECT_EQ(bench_workspace_bytes("msdmsa", 100, c, 4),
            dmsa_workspace_elements(100, 96, 6, 3, 4) * 4);
  EXPECT_THROW(bench_workspace_bytes("linformer", 100, c, 4), ConfigError);
}

TEST(BenchWorkspace, DeformableIsLinearVanillaQuadratic) {
  BenchConfig c;
  const double d1 = static_cast<double>(bench_workspace_bytes("msdmsa", 1024, c, 8));
  const double d2 = static_cast<double>(bench_workspace_bytes("msdmsa", 2048, c, 8));
  EXPECT_DOUBLE_EQ(d2 / d1, 2.0);
  const double v = static_cast<double>(bench_workspace_bytes("vanilla", 4096, c, 8));
  const double d = static_cast<double>(bench_workspace_bytes("msdmsa", 4096, c, 8));
  EXPECT_GT(v / d, 10.0);
}

TEST(LoglogSlope, RecoversPowerLaw) {
  std::vector<double> x{100, 200, 400, 800}, y;
  for (double v : x) y.push_back(3.0 * std::pow(v, 1.7));
  EXPECT_NEAR(loglog_slope(x, y), 1.7, 1e-12);
  EXPECT_THROW(loglog_slope({1.0}, {1.0}), DimensionError);
  EXPECT_THROW(loglog_slope({1.0, 1.0}, {1.0, 2.0}), DimensionError);
  EXPECT_THROW(loglog_slope({1.0, 2.0}, {0.0, 2.0}), DimensionError);
}

TEST(RunBench, SmallSweep) {
  BenchConfig c;
  c.channels = 12;
  c.heads = 2;
  c.levels = 2;
  c.points = 2;
  std::vector<std::string> warnings;
  const auto records = run_bench<double>({"msdmsa", "vanilla"}, {64, 128}, c, &warnings);
  ASSERT_EQ(records.size(), 4u);
  for (const auto& r : records) {
    EXPECT_GT(r.time_ns, 0.0);
    EXPECT_GE(r.repeats, 3);
    EXPECT_EQ(r.workspace_bytes, bench_workspace_bytes(r.mechanism, r.tokens, c, 8));
  }
  const auto csv = bench_csv(records);
  EXPECT_EQ(csv.rfind("# cotr-bench v1\nmechanism,n,c,h,l,k,time_ns,workspace_bytes,repeats\n", 0),
            0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_TRUE(std::isfinite(fitted_exponent(records, "vanilla")));
}

TEST(RunBench, Errors) {
  BenchConfig c;
  EXPECT_THROW(run_bench<float>({"msdmsa"}, {64, 64}, c, nullptr), ConfigError);
  EXPECT_THROW(run_bench<float>({"nope"}, {64, 128}, c, nullptr), ConfigError);
  c.repeats = 2;
  EXPECT_THROW(run_bench<float>({"msdmsa"}, {64, 128}, c, nullptr), ConfigError);
}

TEST(Sweep, ApplyValue) {
  ToyConfig base;
  EXPECT_EQ(apply_sweep_value(base, "K", "3").points, 3);
  EXPECT_EQ(apply_sweep_value(base, "H", "3").heads, 3);
  EXPECT_EQ(apply_sweep_value(base, "L_D", "0").encoder_layers, 0);
  EXPECT_FALSE(apply_sweep_value(base, "scales", "single").multi_scale);
  EXPECT_THROW(apply_sweep_value(base, "H", "5"), ConfigError);  // 24 % 5 != 0
  EXPECT_THROW(apply_sweep_value(base, "scales", "both"), ConfigError);
  EXPECT_THROW(apply_sweep_value(base, "lr", "1"), ConfigError);
}

TEST(Sweep, TinyRun) {
  ToyConfig base;
  base.input = {4, 16, 16};
  base.base_channels = 4;
  base.token_channels = 12;
  base.ffn_width = 16;
  base.iterations = 2;
  std::size_t seen = 0;
  const auto records = run_sweep<float>("K", {"1", "2"}, base, {0, 1},
                                        [&](const SweepRecord&) { ++seen; });
  ASSERT_EQ(records.size(), 4u);
  EXPECT_EQ(seen, 4u);
  EXPECT_EQ(records[3].value, "2");
  EXPECT_EQ(records[3].seed, 1u);
  for (const auto& r : records) {
    EXPECT_GE(r.dice, 0.0);
    EXPECT_LE(r.dice, 1.0);
  }
  EXPECT_EQ(sweep_csv(records).rfind("# cotr-sweep v1\naxis,value,seed,iterations,dice,final_loss\n",
                                     0),
            0u);
}
