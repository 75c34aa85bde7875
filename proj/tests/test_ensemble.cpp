#include <gtest/gtest.h>

#include <cmath>

#include "cml/ensemble.hpp"
#include "support.hpp"

using namespace cml;

namespace {

LatticeConfig ring(int L, double eps) {
  return LatticeConfig(1, L, SiteMap::zigzag3(), Coupling::diffusive(), eps, 1);
}

}  // namespace

TEST(Stats, BasicEstimators) {
  const std::vector<double> x{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(stats::mean(x), 2.5);
  EXPECT_DOUBLE_EQ(stats::variance(x), 5.0 / 3.0);
  const auto fit = stats::linear_fit(std::vector<double>{0, 1, 2}, std::vector<double>{1, 3, 5});
  EXPECT_DOUBLE_EQ(fit.slope, 2.0);
  EXPECT_DOUBLE_EQ(fit.intercept, 1.0);
  EXPECT_DOUBLE_EQ(fit.r2, 1.0);
  EXPECT_THROW(stats::linear_fit(std::vector<double>{1}, std::vector<double>{1}), ConfigError);
  const auto [lo, hi] = stats::wilson_interval(50, 100);
  EXPECT_LT(lo, 0.5);
  EXPECT_GT(hi, 0.5);
  EXPECT_NEAR(hi - lo, 2 * 1.96 * 0.05, 0.01);
  EXPECT_NEAR(stats::normal_cdf(0.0), 0.5, 1e-16);
}

TEST(Ensemble, ZeroObservableAndDeterminism) {
  const auto cfg = ring(8, 0.02);
  const auto z = run_ensemble(cfg, observables::zero(), 50, 40, 10, 1, 1);
  for (double v : z.samples()) EXPECT_EQ(v, 0.0);
  const auto f = observables::coordinate({0}).with_offset(0.5);
  const auto a = run_ensemble(cfg, f, 97, std::vector<long>{5, 40}, 20, 42, 1);
  const auto b = run_ensemble(cfg, f, 97, std::vector<long>{40, 5}, 20, 42, 8);
  EXPECT_EQ(a.partial, b.partial);
  EXPECT_EQ(a.samples().size(), 97u);
  EXPECT_EQ(a.n(), 40);
  EXPECT_THROW(a.samples_at(6), ConfigError);
  const auto c = run_ensemble(cfg, f, 97, 40, 20, 43, 1);
  EXPECT_NE(std::vector<double>(c.samples().begin(), c.samples().end()),
            std::vector<double>(a.samples().begin(), a.samples().end()));
  EXPECT_THROW(run_ensemble(cfg, f, 0, 10, 0, 1), ConfigError);
  EXPECT_THROW(run_ensemble(cfg, f, 10, 0, 0, 1), ConfigError);
  EXPECT_THROW(run_ensemble(cfg, f, 10, 5, -1, 1), ConfigError);
}

TEST(Ensemble, CoboundarySamplesBounded) {
  const auto cfg = ring(8, 0.04);
  const auto run = run_ensemble(cfg, observables::coboundary_of_coordinate(cfg, {0}), 300, 500, 50, 3, 2);
  for (double v : run.samples()) EXPECT_LE(std::abs(v), 2.0);
}

TEST(GreenKubo, ZigzagAutocovariances) {
  // Oracle values first: hand integration gives 1/12 and 1/108.
  EXPECT_NEAR(oracle::zigzag3_autocov(0), 1.0 / 12.0, 1e-12);
  EXPECT_NEAR(oracle::zigzag3_autocov(1), 1.0 / 108.0, 1e-12);
  EXPECT_NEAR(oracle::zigzag3_autocov(2), 1.0 / 972.0, 1e-12);

  const auto cfg = ring(4, 0.0);
  const auto f = observables::coordinate({0}).with_offset(0.5);
  const auto est = green_kubo(cfg, f, 10, 1000000, 100, 9);
  ASSERT_EQ(est.autocov.size(), 11u);
  EXPECT_NEAR(est.autocov[0], 1.0 / 12.0, 3.5 * est.autocov_se[0]);
  EXPECT_NEAR(est.autocov[1], 1.0 / 108.0, 3.5 * est.autocov_se[1]);
  EXPECT_NEAR(est.sigma2, 5.0 / 48.0, 3.5 * est.sigma2_se);
  EXPECT_GT(est.autocov[0], 0.0);
  double s = est.autocov[0];
  for (std::size_t k = 1; k < est.autocov.size(); ++k) s += 2 * est.autocov[k];
  EXPECT_DOUBLE_EQ(s, est.sigma2);
}

TEST(GreenKubo, ZeroCoboundaryAndWarnings) {
  const auto cfg = ring(8, 0.02);
  const auto z = green_kubo(cfg, observables::zero(), 5, 1000, 0, 1);
  EXPECT_EQ(z.sigma2, 0.0);
  EXPECT_FALSE(z.truncation_warning);

  const auto cob = green_kubo(cfg, observables::coboundary_of_coordinate(cfg, {0}), 50, 400000, 100, 2);
  EXPECT_LE(std::abs(cob.sigma2), 3.0 * cob.sigma2_se + 1e-6);
  EXPECT_GE(cob.sigma2, -3.0 * cob.sigma2_se);

  // K = 0 on a correlated observable: |C_0|/C_0 = 1 trips the warning.
  const auto k0 = green_kubo(cfg, observables::coordinate({0}).with_offset(0.5), 0, 10000, 10, 3);
  EXPECT_TRUE(k0.truncation_warning);
  EXPECT_THROW(green_kubo(cfg, observables::zero(), -1, 100, 0, 1), ConfigError);
  EXPECT_THROW(green_kubo(cfg, observables::zero(), 2, 1, 0, 1), ConfigError);
}

TEST(GreenKubo, AgreesWithEnsembleVariance) {
  for (double eps : {0.0, 0.02}) {
    const auto cfg = ring(8, eps);
    const std::vector<Observable> fs{observables::coordinate({0}), observables::cos_coordinate({0}),
                                     observables::product({0}, {1})};
    for (const auto& raw : fs) {
      const auto f = center(raw, cfg, 1000, 400000, 5);
      const auto gk = green_kubo(cfg, f, 30, 400000, 1000, 6);
      EXPECT_GE(gk.sigma2, -3 * gk.sigma2_se);
      const auto run = run_ensemble(cfg, f, 4000, 256, 200, 7, 1);
      const auto ev = ensemble_variance(run, 256);
      // Var(S_n)/n carries an O(1/n) bias on top of noise.
      const double tol = 3.0 * std::hypot(ev.standard_error, gk.sigma2_se) + 0.02 * gk.sigma2;
      EXPECT_NEAR(ev.value, gk.sigma2, tol) << raw.name() << " eps=" << eps;
    }
  }
}

TEST(Clt, SyntheticNormalCalibration) {
  std::vector<double> s(20000);
  for (std::size_t i = 0; i < s.size(); ++i) {
    Stream rng(1, i);
    s[i] = 0.3 * std::sqrt(100.0) * rng.normal();
  }
  const auto rep = clt_test(s, 100, 0.09);
  EXPECT_LT(rep.ks_distance, rep.ks_critical_95);
  EXPECT_NEAR(rep.normalized_variance, 1.0, 0.05);
  EXPECT_NEAR(rep.skewness, 0.0, 0.1);
  EXPECT_NEAR(rep.excess_kurtosis, 0.0, 0.2);
  EXPECT_THROW(clt_test(s, 100, 0.0), DegenerateVarianceError);
  EXPECT_THROW(clt_test(s, 100, -1.0), DegenerateVarianceError);
}

TEST(Clt, ZeroObservableHitsErrorPath) {
  const auto cfg = ring(8, 0.02);
  const auto run = run_ensemble(cfg, observables::zero(), 20, 10, 0, 1, 1);
  const auto gk = green_kubo(cfg, observables::zero(), 5, 1000, 0, 1);
  EXPECT_THROW(clt_test(run, gk.sigma2), DegenerateVarianceError);
}

TEST(Llt, EmptyIntervalsAndGaussianCalibration) {
  std::vector<double> s(200000);
  const double sigma = 0.5;
  const long n = 64;
  for (std::size_t i = 0; i < s.size(); ++i) {
    Stream rng(2, i);
    s[i] = sigma * std::sqrt(double(n)) * rng.normal();
  }
  const auto rep = llt_test(s, n, sigma, {{0.2, 0.2}, {-0.5, 0.5}, {0.3, 0.8}, {-0.8, -0.3}});
  EXPECT_EQ(rep.entries[0].rho, 0.0);
  EXPECT_FALSE(rep.entries[0].low_count_warning);
  for (std::size_t i = 1; i < rep.entries.size(); ++i) {
    const auto& e = rep.entries[i];
    EXPECT_GE(e.rho_gaussian, e.rho_lo - 0.01);
    EXPECT_LE(e.rho_gaussian, e.rho_hi + 0.01);
    EXPECT_FALSE(e.low_count_warning);
  }
  // disjoint intervals of equal length agree within their joint bounds
  EXPECT_LT(std::abs(rep.entries[2].rho - rep.entries[3].rho),
            (rep.entries[2].rho_hi - rep.entries[2].rho_lo) + (rep.entries[3].rho_hi - rep.entries[3].rho_lo));
  const auto few = llt_test(std::vector<double>(50, 0.0), n, sigma, {{-0.5, 0.5}});
  EXPECT_TRUE(few.entries[0].low_count_warning);
  EXPECT_THROW(llt_test(s, n, 0.0, {{0, 1}}), DegenerateVarianceError);
  EXPECT_THROW(llt_test(s, n, 1.0, {{1, 0}}), ConfigError);
}

TEST(Degeneracy, Scans) {
  const auto cfg = ring(8, 0.02);
  const std::vector<long> ns{16, 64, 256, 1024};
  const auto cob = degeneracy_scan(cfg, observables::coboundary_of_coordinate(cfg, {0}), ns, 1000, 100, 4, 1);
  EXPECT_TRUE(cob.degenerate);
  EXPECT_NEAR(cob.slope, -1.0, 0.15);

  const auto f = center(observables::coordinate({0}), cfg, 500, 200000, 1);
  const auto gen = degeneracy_scan(cfg, f, ns, 1000, 100, 5, 1);
  EXPECT_FALSE(gen.degenerate);
  EXPECT_NEAR(gen.slope, 0.0, 0.15);

  const auto zero = degeneracy_scan(cfg, observables::zero(), ns, 50, 0, 6, 1);
  EXPECT_TRUE(zero.all_zero);
  EXPECT_TRUE(zero.degenerate);
  EXPECT_THROW(degeneracy_scan(cfg, f, {64, 16}, 10, 0, 1, 1), ConfigError);
}
