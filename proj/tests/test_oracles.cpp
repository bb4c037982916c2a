// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "oracles/oracles.hpp"

namespace tavat::oracle {
namespace {

TEST(Oracles, RelativeErrorUsesFloor) {
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_NEAR(relative_error(0.0, 1e-10), 1e-10 / 1e-8, 1e-15);
  EXPECT_TRUE(compare_relative("x", 1.0, 1.0 + 1e-9, 1e-6).pass);
  EXPECT_FALSE(compare_absolute("x", 1.0, 1.1, 1e-3).pass);
  EXPECT_NE(compare_absolute("x", 1.0, 1.1, 1e-3).str().find("FAIL"), std::string::npos);
}

TEST(Oracles, FiniteDifferencesOnClosedForm) {
  ScalarFn f = [](const std::vector<double>& x) { return std::sin(x[0]) * x[1] * x[1] + std::exp(x[2]); };
  std::vector<double> x{0.3, -1.2, 0.5};
  auto g = finite_difference_gradient(f, x, {0, 1, 2}, 1e-5);
  EXPECT_NEAR(g[0], std::cos(0.3) * 1.44, 1e-8);
  EXPECT_NEAR(g[1], std::sin(0.3) * 2 * -1.2, 1e-8);
  EXPECT_NEAR(g[2], std::exp(0.5), 1e-8);
  EXPECT_THROW(finite_difference_gradient(f, x, {3}, 1e-5), std::out_of_range);
  EXPECT_THROW(finite_difference_gradient(f, x, {0}, 0.0), std::invalid_argument);

  double slot = 2.0;
  EXPECT_NEAR(finite_difference_in_place([&] { return slot * slot * slot; }, slot, 1e-5), 12.0, 1e-8);
  EXPECT_EQ(slot, 2.0);
  // x^4: the fourth-order stencil is exact up to rounding, the central one is not.
  auto quartic = [&] { return slot * slot * slot * slot; };
  EXPECT_NEAR(finite_difference_in_place_4(quartic, slot, 1e-2), 32.0, 1e-9);
  EXPECT_GT(std::abs(finite_difference_in_place(quartic, slot, 1e-2) - 32.0), 1e-4);
  EXPECT_EQ(slot, 2.0);
  EXPECT_THROW(finite_difference_in_place_4(quartic, slot, -1.0), std::invalid_argument);
}

TEST(Oracles, GridSearchFindsLinearMaximum) {
  // max of c.x over the ball is eps*|c| along c.
  ScalarFn f = [](const std::vector<double>& x) { return 3.0 * x[0] + 4.0 * x[1]; };
  auto r = grid_inner_max(f, 1.0, 2, 0.01);
  EXPECT_NEAR(r.value, 5.0, 5.0 * 1e-3);
  EXPECT_NEAR(r.best[0], 0.6, 0.02);
  for (double v : r.best) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_GT(r.evaluated, 30000u);
}

TEST(Oracles, GridGuard) {
  ScalarFn f = [](const std::vector<double>& x) { return x[0]; };
  EXPECT_EQ(grid_nodes(1.0, 4, 0.02), 101ull * 101 * 101 * 101);
  EXPECT_THROW(grid_inner_max(f, 1.0, 4, 0.02), std::length_error);
  EXPECT_THROW(grid_inner_max(f, 1.0, 7, 0.5), std::invalid_argument);
  EXPECT_NO_THROW(grid_inner_max(f, 1.0, 3, 0.1));
}

TEST(Oracles, ReferenceTokenUpdateHandComputed) {
  // Norms 1 and 2 -> n = 0.5 and 1; unit gradients.
  auto out = reference_token_update({{1.0, 0.0}, {0.0, 2.0}}, {{0.0, 5.0}, {3.0, 0.0}}, 0.5, 100.0);
  EXPECT_DOUBLE_EQ(out[0][0], 0.5);
  EXPECT_DOUBLE_EQ(out[0][1], 0.25);
  EXPECT_DOUBLE_EQ(out[1][0], 0.5);
  EXPECT_DOUBLE_EQ(out[1][1], 2.0);
  // Cold start and projection.
  auto cold = reference_token_update({{0.0}, {0.0}}, {{1.0}, {-1.0}}, 3.0, 1.0);
  EXPECT_NEAR(std::hypot(cold[0][0], cold[1][0]), 1.0, 1e-15);
}

}  // namespace
}  // namespace tavat::oracle
