// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cotr/error.hpp"
#include "cotr/gradcheck.hpp"

using namespace cotr;

namespace {

// f = sum of coeff * values with hand-set analytic gradients.
struct LinearState {
  std::vector<double> values;
};

GradProblem linear_problem(std::vector<double> values, std::vector<double> coeff,
                           std::vector<double> analytic, double offset = 0.0) {
  auto state = std::make_shared<LinearState>();
  state->values = std::move(values);
  GradProblem p;
  p.groups.push_back({"x", state->values, std::move(analytic)});
  p.evaluate = [state, coeff, offset](std::vector<std::int64_t>*) {
    double f = offset;
    for (std::size_t i = 0; i < coeff.size(); ++i) f += coeff[i] * state->values[i];
    return f;
  };
  p.state = state;
  return p;
}

// relu(x) with the sign of x as its piece signature.
GradProblem relu_problem(double x, double analytic) {
  auto state = std::make_shared<LinearState>();
  state->values = {x};
  GradProblem p;
  p.groups.push_back({"x", state->values, {analytic}});
  p.evaluate = [state](std::vector<std::int64_t>* sig) {
    const double v = state->values[0];
    if (sig != nullptr) *sig = {v > 0.0 ? 1 : 0};
    return std::max(v, 0.0);
  };
  p.state = state;
  return p;
}

}  // namespace

TEST(GradCheck, RelativeErrorDefinition) {
  // Numeric gradient is (2, 3); f(x) = 2 + 6 = 8.
  auto p = linear_problem({1.0, 2.0}, {2.0, 3.0}, {2.002, 3.0});
  GradCheckOptions o;
  const auto r = check_group(p, 0, o, 1e-6);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_NEAR(r.max_abs_err, 0.002, 1e-9);
  EXPECT_NEAR(r.max_rel_err, 0.002 / 2.002, 1e-9);
  EXPECT_FALSE(r.pass);
}

TEST(GradCheck, RelativeErrorFloorUsesFunctionScale) {
  // A tiny gradient on a function of size 5e4: the floor is 1e-4 * |f| = 5.
  // Power-of-two step and slope keep the differences exact.
  const double slope = std::ldexp(1.0, -20);
  auto p = linear_problem({0.0}, {slope}, {0.0}, 5e4);
  GradCheckOptions o;
  o.step = 0.5;
  const auto r = check_group(p, 0, o, 1e-6);
  EXPECT_EQ(r.max_abs_err, slope);
  EXPECT_EQ(r.max_rel_err, slope / 5.0);
  EXPECT_TRUE(r.pass);
}

TEST(GradCheck, StepsAroundReluKink) {
  GradCheckOptions o;
  // Kink 1e-6 below the point: the h and h/4 stencils cross it.
  auto above = relu_problem(1e-6, 1.0);
  auto r = check_group(above, 0, o, 1e-6);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
  // 3e-7 below the kink: every central stencil crosses, the one-sided one
  // stays on the flat side.
  auto below = relu_problem(-3e-7, 0.0);
  r = check_group(below, 0, o, 1e-6);
  EXPECT_EQ(r.checked, 1u);
  EXPECT_EQ(r.skipped, 0u);
  EXPECT_TRUE(r.pass);
  // A wrong analytic value on the same point is still caught.
  auto wrong = relu_problem(-3e-7, 1.0);
  EXPECT_FALSE(check_group(wrong, 0, o, 1e-6).pass);
}

TEST(GradCheck, UnknownModule) {
  EXPECT_THROW(run_gradcheck("nope", {}), ConfigError);
}

TEST(GradCheck, ZeroParamsOnlyForEncoder) {
  GradCheckOptions o;
  o.zero_params = true;
  const auto r = run_gradcheck("encoder", o);
  EXPECT_TRUE(r.pass()) << r.format();
  EXPECT_THROW(run_gradcheck("msdmsa", o), ConfigError);
}

TEST(GradCheck, InjectedFaultFails) {
  for (const char* m : {"linear", "msdmsa", "loss"}) {
    GradCheckOptions o;
    o.inject_fault = true;
    EXPECT_FALSE(run_gradcheck(m, o).pass()) << m;
  }
}

TEST(GradCheck, ReportFormat) {
  const auto r = run_gradcheck("relu", {});
  const auto text = r.format();
  EXPECT_NE(text.find("gradcheck relu"), std::string::npos);
  EXPECT_NE(text.find("result: PASS"), std::string::npos);
}

class ModuleGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(ModuleGradients, PassOverFiveSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GradCheckOptions o;
    o.seed = seed;
    const auto r = run_gradcheck(GetParam(), o);
    EXPECT_TRUE(r.pass()) << "seed " << seed << "\n" << r.format();
    for (const auto& g : r.groups) EXPECT_GT(g.checked, 0u) << g.name;
  }
}

INSTANTIATE_TEST_SUITE_P(All, ModuleGradients, ::testing::ValuesIn(gradcheck_modules()),
                         [](const auto& info) {
                           std::string n = info.param;
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });
