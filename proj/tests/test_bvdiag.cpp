#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cml/bvdiag.hpp"
#include "support.hpp"

using namespace cml;

// Lasota-Yorke constant for zigzag3 with coefficient 2/3. A sweep over 1e5
// random densities needed 1.93.
constexpr double kLasotaYorkeC = 2.0;

TEST(Variation, Examples) {
  EXPECT_DOUBLE_EQ(variation(PCDensity::uniform(10)), 2.0);
  EXPECT_DOUBLE_EQ(variation(PCDensity::uniform(10, 0.0)), 0.0);
  std::vector<double> v(10, 0.0);
  v[4] = 0.7;
  EXPECT_DOUBLE_EQ(variation(PCDensity(PCDensity::uniform_grid(10), v)), 1.4);
}

TEST(TotalMass, Examples) {
  EXPECT_DOUBLE_EQ(total_mass_norm(PCDensity::uniform(7)), 1.0);
  EXPECT_DOUBLE_EQ(total_mass_norm(PCDensity({0.0, 0.5, 1.0}, std::vector<double>{-2.0, 0.0})), 1.0);
  EXPECT_DOUBLE_EQ(total_mass_norm(PCDensity::uniform(3, 0.0)), 0.0);
}

TEST(AbsoluteValue, Examples) {
  std::vector<double> alt(8);
  for (int i = 0; i < 8; ++i) alt[i] = i % 2 ? -1.0 : 1.0;
  const auto a = absolute_value(PCDensity(PCDensity::uniform_grid(8), alt));
  for (auto v : a.values()) EXPECT_EQ(v, cplx(1.0));
  const PCDensity pos(PCDensity::uniform_grid(4), std::vector<double>{0.5, 2.0, 0.0, 1.0});
  EXPECT_EQ(absolute_value(pos).values(), pos.values());
  std::vector<cplx> ph(6);
  for (int i = 0; i < 6; ++i) ph[i] = std::polar(1.0, 0.9 * i);
  const auto b = absolute_value(PCDensity(PCDensity::uniform_grid(6), ph));
  for (auto v : b.values()) EXPECT_NEAR(std::abs(v - cplx(1.0)), 0.0, 1e-15);
}

TEST(LipschitzMultiply, Examples) {
  Stream rng(5, 0, StreamDomain::bv_suite);
  const auto d = random_density(rng, 27, false);
  const auto same = lipschitz_multiply(d, [](double) { return 1.0; });
  EXPECT_EQ(same.values(), d.values());
  EXPECT_NEAR(variation(lipschitz_multiply(d, [](double) { return -2.5; })), 2.5 * variation(d), 1e-12);

  const auto u = PCDensity::uniform(100);
  const auto xu = lipschitz_multiply(u, [](double x) { return x; });
  const double bound = lipschitz_bound(u, 1.0, 1.0);
  EXPECT_NEAR(bound - 2.0 / 100, 3.0, 1e-12);
  EXPECT_LE(variation(xu), bound);
  EXPECT_NEAR(variation(xu), 2 * 0.995, 1e-12);  // rises to 0.995, drops to 0
}

TEST(BvProperty, VariationBoundsAndSeminormAxioms) {
  const auto map = SiteMap::zigzag3();
  for (int trial = 0; trial < 10000; ++trial) {
    Stream rng(11, trial, StreamDomain::bv_suite);
    const std::size_t M = 1 + rng.below(200);
    const auto d = random_density(rng, M, trial % 3 == 0);
    const auto e = random_density(rng, M, trial % 3 == 1);
    const double vd = variation(d);

    EXPECT_LE(variation(absolute_value(d)), vd + 1e-12);
    EXPECT_LE(total_mass_norm(d), 0.5 * vd + 1e-12);

    const double a = rng.uniform(-2, 2), w = rng.uniform(0, 20), phase = rng.uniform(0, 6.3), c = rng.uniform(-1, 1);
    auto u = [&](double x) { return a * std::sin(w * x + phase) + c; };
    const auto ud = lipschitz_multiply(d, u);
    EXPECT_LE(variation(ud), lipschitz_bound(d, std::abs(a) + std::abs(c), std::abs(a) * w) + 1e-12);

    const cplx s(rng.uniform(-3, 3), rng.uniform(-3, 3));
    std::vector<cplx> sd(M), sum(M);
    for (std::size_t i = 0; i < M; ++i) {
      sd[i] = s * d[i];
      sum[i] = d[i] + e[i];
    }
    EXPECT_NEAR(variation(PCDensity(d.grid(), sd)), std::abs(s) * vd, 1e-10 * (1 + vd));
    EXPECT_LE(variation(PCDensity(d.grid(), sum)), vd + variation(e) + 1e-12);

    if (M % 3 == 0) {
      const auto Pd = transfer_apply(map, d);
      EXPECT_LE(variation(Pd), 2.0 / 3.0 * vd + kLasotaYorkeC * total_mass_norm(d) + 1e-12);
    }
  }
}

TEST(Variation2D, UniformAndAxes) {
  const PCDensity2D u(5, 7, std::vector<cplx>(35, 1.0));
  EXPECT_DOUBLE_EQ(variation(u), 2.0);
  EXPECT_DOUBLE_EQ(total_mass_norm(u), 1.0);
  // Value depends on the first coordinate only: no variation along axis 1
  // beyond the two boundary jumps.
  std::vector<cplx> v(4 * 3);
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 4; ++i) v[i + 4 * j] = double(i);
  const PCDensity2D d(4, 3, v);
  EXPECT_DOUBLE_EQ(axis_variation(d, 0), 6.0);
  EXPECT_DOUBLE_EQ(axis_variation(d, 1), 3.0);
  EXPECT_DOUBLE_EQ(variation(d), 6.0);
  EXPECT_THROW(PCDensity2D(2, 2, std::vector<cplx>(3)), ConfigError);
}

TEST(Variation2D, Property) {
  for (int trial = 0; trial < 500; ++trial) {
    Stream rng(12, trial, StreamDomain::bv_suite);
    const std::size_t nx = 1 + rng.below(20), ny = 1 + rng.below(20);
    std::vector<cplx> v(nx * ny);
    for (auto& x : v) x = cplx(rng.uniform(-1, 1), trial % 2 ? rng.uniform(-1, 1) : 0.0);
    const PCDensity2D d(nx, ny, v);
    EXPECT_LE(variation(absolute_value(d)), variation(d) + 1e-12);
    EXPECT_LE(total_mass_norm(d), 0.5 * variation(d) + 1e-12);
  }
}
