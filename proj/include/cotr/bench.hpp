// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Scaling benchmarks (deformable vs full attention) and hyperparameter sweeps
// over the toy segmentation task.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cotr/sequence.hpp"
#include "cotr/toy_net.hpp"

namespace cotr {

struct BenchConfig {
  int channels = 96;
  int heads = 6;
  int levels = 3;
  int points = 4;
  int repeats = 3;
  std::uint64_t seed = 0;
};

struct BenchRecord {
  std::string mechanism;  // "msdmsa" or "vanilla"
  std::size_t tokens = 0;
  int channels = 0;
  int heads = 0;
  int levels = 0;
  int points = 0;
  double time_ns = 0.0;  // median over `repeats`
  std::size_t workspace_bytes = 0;
  int repeats = 0;
};

/// A pyramid with exactly n tokens: levels hold n/2, n/4, ... and the last
/// level takes the remainder. Power-of-two level sizes get near-cubic dims;
/// other sizes fall back to (1, 1, size).
LevelLayout bench_layout(std::size_t n, int levels);

/// Analytic bytes retained for a backward pass at this size.
std::size_t bench_workspace_bytes(const std::string& mechanism, std::size_t tokens,
                                  const BenchConfig& config, std::size_t element_size);

/// Times forward passes; appends human-readable warnings (e.g. coarse timer).
template <typename T>
std::vector<BenchRecord> run_bench(const std::vector<std::string>& mechanisms,
                                   const std::vector<std::size_t>& tokens,
                                   const BenchConfig& config, std::vector<std::string>* warnings);

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Slope of time vs N over the records of one mechanism.
double fitted_exponent(const std::vector<BenchRecord>& records, const std::string& mechanism);

std::string bench_csv(const std::vector<BenchRecord>& records);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepRecord {
  std::string axis;   // K, H, L_D or scales
  std::string value;  // e.g. "4" or "multi"
  std::uint64_t seed = 0;
  int iterations = 0;
  double dice = 0.0;
  double final_loss = 0.0;
};

/// The base config with one axis set to `value`; ConfigError when the axis
/// is unknown or the result is invalid.
ToyConfig apply_sweep_value(const ToyConfig& base, const std::string& axis,
                            const std::string& value);

template <typename T>
std::vector<SweepRecord> run_sweep(const std::string& axis, const std::vector<std::string>& values,
                                   const ToyConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const std::function<void(const SweepRecord&)>& on_record = {});

std::string sweep_csv(const std::vector<SweepRecord>& records);

}  // namespace cotr
