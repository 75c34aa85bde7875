#include <gtest/gtest.h>

#include <cmath>

#include "cml/bvdiag.hpp"
#include "cml/sitemap.hpp"
#include "support.hpp"

using namespace cml;

TEST(SiteMap, ZigzagEvaluation) {
  const auto m = SiteMap::zigzag3();
  EXPECT_EQ(m(0.0), 0.0);
  EXPECT_DOUBLE_EQ(m(0.5), 0.5);
  EXPECT_DOUBLE_EQ(m(1.0 / 3.0), 1.0);
  EXPECT_DOUBLE_EQ(m(0.1), 0.1 * 3);
  EXPECT_DOUBLE_EQ(m(1.0), 1.0);
  EXPECT_DOUBLE_EQ(m(2.0 / 3.0), 0.0);
}

TEST(SiteMap, RightContinuousBranchLookup) {
  const auto m = SiteMap::zigzag3();
  EXPECT_EQ(m.branch_of(0.0), 0u);
  EXPECT_EQ(m.branch_of(1.0 / 3.0), 1u);
  EXPECT_EQ(m.branch_of(2.0 / 3.0), 2u);
  EXPECT_EQ(m.branch_of(1.0), 2u);
}

TEST(SiteMap, DomainTolerance) {
  const auto m = SiteMap::zigzag3();
  EXPECT_NO_THROW(m(1.0 + 5e-13));
  EXPECT_NO_THROW(m(-5e-13));
  EXPECT_THROW(m(1.0 + 1e-9), DomainError);
  EXPECT_THROW(m(-1e-9), DomainError);
  EXPECT_THROW(m(std::nan("")), DomainError);
}

TEST(SiteMap, ConstructionErrors) {
  EXPECT_THROW(SiteMap({0.0, 0.5}, {LinearBranch{3, 0}}), ConfigError);
  EXPECT_THROW(SiteMap({0.0, 0.5, 0.5, 1.0}, {LinearBranch{3, 0}, LinearBranch{3, 0}, LinearBranch{3, 0}}),
               ConfigError);
  EXPECT_THROW(SiteMap({0.0, 1.0}, {LinearBranch{3, 0}, LinearBranch{3, 0}}), ConfigError);
}

TEST(Validate, ZigzagPasses) {
  const auto rep = validate(SiteMap::zigzag3(), 17);
  EXPECT_TRUE(rep.ok());
  EXPECT_DOUBLE_EQ(rep.min_sampled_slope, 3.0);
  EXPECT_DOUBLE_EQ(SiteMap::zigzag3().min_slope(), 3.0);
}

TEST(Validate, ShallowBranchFailsExpansion) {
  // slope 1.5 on [0, 2/3], then steep return
  const SiteMap m({0.0, 2.0 / 3.0, 1.0}, {LinearBranch{1.5, 0.0}, LinearBranch{-3.0, 3.0}});
  const auto rep = validate(m, 9);
  EXPECT_FALSE(rep.expanding);
  ASSERT_TRUE(rep.expansion_failure_at.has_value());
  EXPECT_LE(*rep.expansion_failure_at, 2.0 / 3.0);
  EXPECT_TRUE(rep.continuous);
}

TEST(Validate, TentIsBoundaryCase) {
  const auto rep = validate(SiteMap::tent(), 9);
  EXPECT_FALSE(rep.expanding);
  EXPECT_TRUE(rep.continuous);
  EXPECT_TRUE(rep.in_range);
  EXPECT_DOUBLE_EQ(rep.min_sampled_slope, 2.0);
}

TEST(Validate, DiscontinuityAndRangeReported) {
  const SiteMap jump({0.0, 0.5, 1.0}, {LinearBranch{3.0, 0.0}, LinearBranch{3.0, -1.5}});
  auto rep = validate(jump, 5);
  EXPECT_FALSE(rep.continuous);
  EXPECT_DOUBLE_EQ(*rep.continuity_failure_at, 0.5);
  EXPECT_FALSE(rep.in_range);
  EXPECT_THROW(validate(jump, 1), ConfigError);
}

TEST(Validate, NonMonotonePolynomialBranch) {
  // 12 x (1 - x) is not monotone on [0, 1]
  const SiteMap m({0.0, 1.0}, {PolynomialBranch{{0.0, 12.0, -12.0}}});
  const auto rep = validate(m, 101);
  EXPECT_FALSE(rep.monotone);
  EXPECT_FALSE(rep.expanding);
  EXPECT_FALSE(m.piecewise_linear());
}

TEST(Transfer, UniformIsInvariant) {
  const auto out = transfer_apply(SiteMap::zigzag3(), PCDensity::uniform(27));
  for (auto v : out.values()) EXPECT_NEAR(std::abs(v - cplx(1.0)), 0.0, 1e-15);
}

TEST(Transfer, FirstThirdSpreadsUniformly) {
  std::vector<double> v(27, 0.0);
  for (int i = 0; i < 9; ++i) v[i] = 3.0;
  const auto out = transfer_apply(SiteMap::zigzag3(), PCDensity(PCDensity::uniform_grid(27), v));
  for (auto x : out.values()) EXPECT_NEAR(std::abs(x - cplx(1.0)), 0.0, 1e-15);
}

TEST(Transfer, ZeroStaysZero) {
  const auto out = transfer_apply(SiteMap::zigzag(5), PCDensity::uniform(25, 0.0));
  for (auto x : out.values()) EXPECT_EQ(x, cplx(0.0));
}

TEST(Transfer, AlignmentErrors) {
  EXPECT_THROW(transfer_apply(SiteMap::zigzag3(), PCDensity::uniform(10)), AlignmentError);
  const SiteMap poly({0.0, 1.0}, {PolynomialBranch{{0.0, 3.0}}});
  EXPECT_THROW(transfer_apply(poly, PCDensity::uniform(9)), AlignmentError);
  // 4 cells: cell [1/4, 1/2] straddles 1/3
  EXPECT_THROW(cell_images(SiteMap::zigzag3(), PCDensity::uniform_grid(4)), AlignmentError);
}

TEST(Transfer, MatchesPreimageOracle) {
  for (const auto& map : {SiteMap::zigzag3(), SiteMap::zigzag(5)}) {
    const int M = static_cast<int>(map.branch_count()) * 9;
    const auto P = oracle::ulam_by_preimages(map, M);
    for (int j = 0; j < M; ++j) {
      std::vector<double> e(M, 0.0);
      e[j] = 1.0;
      const auto out = transfer_apply(map, PCDensity(PCDensity::uniform_grid(M), e));
      for (int i = 0; i < M; ++i) EXPECT_NEAR(out[i].real(), P[i][j], 1e-12);
    }
  }
}

TEST(TransferProperty, MassPositivityDuality) {
  const auto map = SiteMap::zigzag3();
  for (int trial = 0; trial < 400; ++trial) {
    Stream rng(99, trial, StreamDomain::bv_suite);
    std::size_t M = 3;
    for (std::uint64_t e = rng.below(4); e > 0; --e) M *= 3;
    const auto d = random_density(rng, M, trial % 2 == 1);
    const auto Pd = transfer_apply(map, d);
    EXPECT_NEAR(std::abs(Pd.mass() - d.mass()), 0.0, 1e-12);

    bool nonneg = true;
    for (auto v : d.values()) nonneg = nonneg && v.imag() == 0.0 && v.real() >= 0.0;
    if (nonneg)
      for (auto v : Pd.values()) EXPECT_GE(v.real(), 0.0);

    std::vector<cplx> phi(M);
    for (auto& p : phi) p = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
    cplx lhs = 0.0;
    for (std::size_t i = 0; i < M; ++i) lhs += Pd[i] * phi[i] * Pd.width(i);
    const cplx rhs = oracle::pullback_integral(map, d.values(), phi);
    EXPECT_NEAR(std::abs(lhs - rhs), 0.0, 1e-10);
  }
}

TEST(SiteMapJson, LinearRoundTripIsBitExact) {
  const SiteMap m({0.0, 0.3, 1.0}, {LinearBranch{10.0 / 3.0, 0.0}, LinearBranch{-1.0 / 0.7, 1.0 / 0.7}});
  const auto j = to_json(m);
  const auto back = sitemap_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.singularities(), m.singularities());
  for (std::size_t b = 0; b < m.branch_count(); ++b) {
    const auto& x = std::get<LinearBranch>(m.branches()[b]);
    const auto& y = std::get<LinearBranch>(back.branches()[b]);
    EXPECT_EQ(x.slope, y.slope);
    EXPECT_EQ(x.intercept, y.intercept);
  }
}

TEST(SiteMapJson, PresetsPolynomialAndErrors) {
  EXPECT_EQ(sitemap_from_json("zigzag3").branch_count(), 3u);
  EXPECT_EQ(sitemap_from_json("zigzag7").branch_count(), 7u);
  EXPECT_EQ(sitemap_from_json("tent").branch_count(), 2u);
  EXPECT_THROW(sitemap_from_json("logistic"), ConfigError);
  const auto poly = sitemap_from_json(nlohmann::json::parse(
      R"({"singularities":[0,1],"branches":[{"kind":"expr","poly":[0,2.5,0.5]}]})"));
  EXPECT_DOUBLE_EQ(poly(0.2), 2.5 * 0.2 + 0.5 * 0.04);
  EXPECT_THROW(sitemap_from_json(nlohmann::json::parse(
                   R"({"singularities":[0,1],"branches":[{"kind":"linear","a":3,"b":0}],"extra":1})")),
               ConfigError);
  EXPECT_THROW(sitemap_from_json(nlohmann::json::parse(
                   R"({"singularities":[0,1],"branches":[{"kind":"linear","a":3,"b":0,"c":1}]})")),
               ConfigError);
  EXPECT_THROW(sitemap_from_json(nlohmann::json::parse(R"({"singularities":[0,1]})")), ConfigError);
}
