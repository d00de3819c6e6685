// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Analytic-vs-numeric gradient verification.
//
// Every checkable module is reduced to a scalar f(theta) (a random projection
// of its output, or the loss itself) with analytic gradients from its backward
// pass. Entries are compared against central differences in double precision.
//
// Piecewise-smooth modules (ReLU, trilinear cells, border clamps) expose a
// "piece signature". When a difference stencil crosses a piece boundary the
// engine retries with smaller steps, then with a one-sided second-order
// stencil on a side that stays on the same piece; entries that cannot be
// isolated are skipped and counted.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cotr {

struct GradGroupResult {
  std::string name;
  std::size_t size = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // entries on a piece boundary
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::string module;
  double threshold = 1e-6;
  std::vector<GradGroupResult> groups;

  bool pass() const;
  std::string format() const;
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  /// Entries sampled per group; 0 checks every entry.
  std::size_t max_entries = 0;
  /// Relative-error threshold; <= 0 picks the module default.
  double threshold = 0.0;
  /// Spatial dims for volume-shaped modules; non-positive keeps the default.
  int dims_d = 0;
  int dims_h = 0;
  int dims_w = 0;
  /// Build the module without learnable parameters where supported.
  bool zero_params = false;
  /// Corrupt one analytic gradient entry (negative control).
  bool inject_fault = false;
};

/// A scalar function of several parameter groups with precomputed analytic
/// gradients. `evaluate` reads the current values; when `signature` is not
/// null it also records the active smooth piece.
struct GradProblem {
  struct Group {
    std::string name;
    std::span<double> values;
    std::vector<double> analytic;
  };
  std::vector<Group> groups;
  std::function<double(std::vector<std::int64_t>* signature)> evaluate;
  std::shared_ptr<void> state;  // keeps the storage behind `values` alive
};

/// Relative error used by every report:
///   |a - n| / max(|a|, |n|, 1e-3 * G, 1e-4 * max(1, |f|))
/// with G the largest |n| among the group's checked entries and f the value
/// of the scalar at the unperturbed point.
GradGroupResult check_group(GradProblem& problem, std::size_t group, const GradCheckOptions& options,
                            double threshold);

GradCheckReport run_gradcheck(const std::string& module, const GradCheckOptions& options);

/// Modules accepted by run_gradcheck. "tensor-core" runs every primitive.
std::vector<std::string> gradcheck_modules();

/// Builds the problem for one module (exposed for tests).
GradProblem make_grad_problem(const std::string& module, const GradCheckOptions& options);

double default_threshold(const std::string& module);

}  // namespace cotr
