#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "neuroforge/ellipse.hpp"
#include "neuroforge/rng.hpp"
#include "support/moment_oracle.hpp"

namespace nf = neuroforge;
using nf::testing::axis_angle_diff;
using nf::testing::moment_oracle;

namespace {

nf::EllipseFit fit(const nf::BinaryGrid& g) {
  return nf::fit_ellipse_slice(g.shape(), 0, [&](int z, int y, int x) { return g(z, y, x) != 0; });
}

}  // namespace

TEST(Ellipse, DiskIsRoundWithZeroOrientation) {
  const auto g = nf::rasterize_ellipse(41, 41, 20, 20, 10, 10, 0);
  const auto f = fit(g);
  EXPECT_EQ(f.theta, 0.0);
  EXPECT_NEAR(f.major_len, 20.0, 1.0);
  EXPECT_NEAR(f.minor_len, 20.0, 1.0);
  EXPECT_DOUBLE_EQ(f.cy, 20.0);
  EXPECT_DOUBLE_EQ(f.cx, 20.0);
}

TEST(Ellipse, AxisAlignedLengths) {
  const auto g = nf::rasterize_ellipse(64, 64, 32, 32, 20, 10, 0);
  const auto f = fit(g);
  EXPECT_LT(std::abs(f.theta), 0.02);
  EXPECT_NEAR(f.major_len, 40.0, 2.0);
  EXPECT_NEAR(f.minor_len, 20.0, 1.0);
  EXPECT_GE(f.major_len, f.minor_len);
}

TEST(Ellipse, RotationsAgreeWithTruthAndOracle) {
  for (double rot : {0.0, std::numbers::pi / 6, std::numbers::pi / 4, std::numbers::pi / 3}) {
    const auto g = nf::rasterize_ellipse(64, 64, 31.5, 32.25, 20, 10, rot);
    const auto f = fit(g);
    const auto o = moment_oracle(g);
    EXPECT_LT(axis_angle_diff(f.theta, rot), 0.02) << rot;
    EXPECT_NEAR(f.major_len, 40.0, 2.0) << rot;
    EXPECT_NEAR(f.theta, o.theta, 1e-9) << rot;
    EXPECT_NEAR(f.major_len, o.major_len, 1e-9) << rot;
    EXPECT_NEAR(f.minor_len, o.minor_len, 1e-9) << rot;
  }
}

TEST(Ellipse, VerticalMajorAxisMapsToHalfPi) {
  const auto g = nf::rasterize_ellipse(64, 64, 32, 32, 10, 20, 0);
  EXPECT_DOUBLE_EQ(fit(g).theta, std::numbers::pi / 2);
}

TEST(Ellipse, OrientationIsRotationEquivariant) {
  nf::Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const double a = rng.uniform(12, 20), b = rng.uniform(6, 0.7 * a);
    const double t0 = rng.uniform(-1.5, 1.5), phi = rng.uniform(-3, 3);
    const auto g0 = nf::rasterize_ellipse(64, 64, 32, 32, a, b, t0);
    const auto g1 = nf::rasterize_ellipse(64, 64, 32, 32, a, b, t0 + phi);
    ASSERT_GE(std::count(g0.data().begin(), g0.data().end(), 1), 200);
    EXPECT_LT(axis_angle_diff(fit(g1).theta, fit(g0).theta + phi), 0.05) << a << " " << b;
    EXPECT_GT(fit(g0).theta, -std::numbers::pi / 2);
    EXPECT_LE(fit(g0).theta, std::numbers::pi / 2);
  }
}

TEST(Ellipse, DegenerateRegionsAreRejected) {
  EXPECT_THROW(nf::fit_ellipse({{0, 0}, {1, 1}}), nf::DataError);
  EXPECT_THROW(nf::fit_ellipse({{0, 0}, {1, 1}, {2, 2}, {5, 5}}), nf::DataError);
  EXPECT_THROW(nf::fit_ellipse({{3, 0}, {3, 1}, {3, 2}}), nf::DataError);
  EXPECT_NO_THROW(nf::fit_ellipse({{0, 0}, {0, 1}, {1, 0}}));
}

TEST(Ellipse, MaxAreaSlicePrefersFirstOnTies) {
  nf::BinaryGrid g({3, 4, 4}, 0);
  g(0, 0, 0) = 1;
  g(1, 0, 0) = g(1, 1, 1) = 1;
  g(2, 2, 2) = g(2, 3, 3) = 1;
  const auto [z, n] = nf::max_area_slice(g.shape(), [&](int a, int b, int c) { return g(a, b, c) != 0; });
  EXPECT_EQ(z, 1);
  EXPECT_EQ(n, 2u);
}
