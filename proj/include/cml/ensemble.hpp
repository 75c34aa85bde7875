#pragma once

// Ensembles of Birkhoff sums and the statistics built on them: Green-Kubo
// variance, CLT and LLT checks, coboundary detection.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cml/error.hpp"
#include "cml/lattice.hpp"
#include "cml/observable.hpp"
#include "cml/parallel.hpp"
#include "cml/rng.hpp"
#include "cml/stats.hpp"

namespace cml {

inline constexpr long kDefaultBurnIn = 1000;
inline constexpr int kDefaultGreenKuboLag = 50;

// n_traj independent trajectories; partial[h][i] = S_{horizons[h]} f for
// trajectory i. Trajectory i draws from Stream(master_seed, i), so the
// samples do not depend on the worker count.
struct EnsembleRun {
  LatticeConfig cfg;
  Observable f;
  std::size_t n_traj = 0;
  std::vector<long> horizons;
  long n_burn = 0;
  std::uint64_t master_seed = 0;
  std::vector<std::vector<double>> partial;

  long n() const { return horizons.back(); }
  std::span<const double> samples() const { return partial.back(); }

  std::span<const double> samples_at(long n) const {
    const auto it = std::find(horizons.begin(), horizons.end(), n);
    if (it == horizons.end()) throw ConfigError("EnsembleRun: horizon not recorded");
    return partial[static_cast<std::size_t>(it - horizons.begin())];
  }
};

inline EnsembleRun run_ensemble(const LatticeConfig& cfg, const Observable& f, std::size_t n_traj,
                                std::vector<long> horizons, long n_burn, std::uint64_t master_seed,
                                unsigned workers = 0) {
  if (n_traj < 1) throw ConfigError("run_ensemble: need at least one trajectory");
  if (horizons.empty()) throw ConfigError("run_ensemble: no horizons");
  if (n_burn < 0) throw ConfigError("run_ensemble: negative burn-in");
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());
  if (horizons.front() < 1) throw ConfigError("run_ensemble: horizons must be >= 1");

  EnsembleRun run{cfg, f, n_traj, horizons, n_burn, master_seed, {}};
  run.partial.assign(horizons.size(), std::vector<double>(n_traj, 0.0));
  const long n_max = horizons.back();

  parallel_for(n_traj, workers, [&](std::size_t begin, std::size_t end) {
    std::vector<double> x(cfg.sites()), scratch(cfg.sites());
    auto fb = f.bind(cfg.torus());
    for (std::size_t i = begin; i < end; ++i) {
      Stream rng(master_seed, i, StreamDomain::trajectory);
      for (auto& v : x) v = rng.uniform();
      for (long k = 0; k < n_burn; ++k) step_inplace(cfg, x, scratch);
      double sum = 0.0;
      std::size_t h = 0;
      for (long k = 1; k <= n_max; ++k) {
        sum += fb(x);
        step_inplace(cfg, x, scratch);
        if (k == horizons[h]) run.partial[h++][i] = sum;
      }
    }
  });
  return run;
}

inline EnsembleRun run_ensemble(const LatticeConfig& cfg, const Observable& f, std::size_t n_traj, long n,
                                long n_burn, std::uint64_t master_seed, unsigned workers = 0) {
  return run_ensemble(cfg, f, n_traj, std::vector<long>{n}, n_burn, master_seed, workers);
}

// Var(S_n f)/n from the ensemble, with its standard error.
struct EnsembleVariance {
  long n = 0;
  double value = 0.0;
  double standard_error = 0.0;
};

inline EnsembleVariance ensemble_variance(const EnsembleRun& run, long n) {
  const auto s = run.samples_at(n);
  return {n, stats::variance(s) / static_cast<double>(n),
          stats::variance_standard_error(s) / static_cast<double>(n)};
}

// sigma^2 ~ C_0 + 2 sum_{k=1}^K C_k with C_k = int f . f o T^k dmu, from one
// long trajectory; errors by leave-one-block-out jackknife.
struct VarianceEstimate {
  double sigma2 = 0.0;
  double sigma2_se = 0.0;
  std::vector<double> autocov;
  std::vector<double> autocov_se;
  int K = 0;
  long n_avg = 0;
  double decay_ratio = 0.0;
  bool truncation_warning = false;
};

inline VarianceEstimate green_kubo(const LatticeConfig& cfg, const Observable& f, int K, long n_avg, long n_burn,
                                   std::uint64_t seed) {
  if (K < 0) throw ConfigError("green_kubo: K must be nonnegative");
  if (n_avg < 2) throw ConfigError("green_kubo: need n_avg >= 2");
  const std::size_t lags = static_cast<std::size_t>(K) + 1;
  const std::size_t blocks = static_cast<std::size_t>(std::min<long>(64, n_avg));

  Stream rng(seed, 0, StreamDomain::green_kubo);
  auto x = random_state(cfg, rng).sites();
  std::vector<double> scratch(x.size());
  for (long k = 0; k < n_burn; ++k) step_inplace(cfg, x, scratch);
  auto fb = f.bind(cfg.torus());

  // ring[j % lags] holds f at time j and the jackknife block of origin j.
  std::vector<double> ring(lags, 0.0);
  std::vector<std::size_t> ring_block(lags, 0);
  std::vector<double> block_sum(blocks * lags, 0.0);
  std::vector<long> block_count(blocks, 0);
  auto block_of = [&](long i) {
    return static_cast<std::size_t>(static_cast<unsigned long long>(i) * blocks / static_cast<unsigned long long>(n_avg));
  };
  for (long i = 0; i < n_avg; ++i) ++block_count[block_of(i)];

  const long total = n_avg + K;
  for (long j = 0; j < total; ++j) {
    const double fj = fb(x);
    const std::size_t slot = static_cast<std::size_t>(j) % lags;
    ring[slot] = fj;
    ring_block[slot] = j < n_avg ? block_of(j) : 0;
    for (std::size_t k = 0; k < lags; ++k) {
      const long i = j - static_cast<long>(k);
      if (i < 0) break;
      if (i >= n_avg) continue;
      const std::size_t si = slot >= k ? slot - k : slot + lags - k;
      block_sum[ring_block[si] * lags + k] += ring[si] * fj;
    }
    if (j + 1 < total) step_inplace(cfg, x, scratch);
  }

  std::vector<double> total_sum(lags, 0.0);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t k = 0; k < lags; ++k) total_sum[k] += block_sum[b * lags + k];

  VarianceEstimate est;
  est.K = K;
  est.n_avg = n_avg;
  est.autocov.resize(lags);
  for (std::size_t k = 0; k < lags; ++k) est.autocov[k] = total_sum[k] / static_cast<double>(n_avg);
  auto sigma_of = [&](const std::vector<double>& c) {
    double s = c[0];
    for (std::size_t k = 1; k < c.size(); ++k) s += 2.0 * c[k];
    return s;
  };
  est.sigma2 = sigma_of(est.autocov);

  // Jackknife over time blocks.
  std::vector<std::vector<double>> loo(blocks, std::vector<double>(lags));
  std::vector<double> loo_sigma(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    const double count = static_cast<double>(n_avg - block_count[b]);
    for (std::size_t k = 0; k < lags; ++k) loo[b][k] = (total_sum[k] - block_sum[b * lags + k]) / count;
    loo_sigma[b] = sigma_of(loo[b]);
  }
  auto jackknife_se = [&](auto value_of) {
    double m = 0.0;
    for (std::size_t b = 0; b < blocks; ++b) m += value_of(b);
    m /= static_cast<double>(blocks);
    double s = 0.0;
    for (std::size_t b = 0; b < blocks; ++b) s += (value_of(b) - m) * (value_of(b) - m);
    return std::sqrt(s * static_cast<double>(blocks - 1) / static_cast<double>(blocks));
  };
  est.autocov_se.resize(lags);
  for (std::size_t k = 0; k < lags; ++k) est.autocov_se[k] = jackknife_se([&](std::size_t b) { return loo[b][k]; });
  est.sigma2_se = jackknife_se([&](std::size_t b) { return loo_sigma[b]; });

  est.decay_ratio = est.autocov[0] > 0.0 ? std::abs(est.autocov[lags - 1]) / est.autocov[0] : 0.0;
  est.truncation_warning = est.decay_ratio > 0.01;
  return est;
}

// Distance of S_n f / sqrt(n sigma^2) from N(0, 1).
struct CltReport {
  long n = 0;
  std::size_t n_traj = 0;
  double sigma2 = 0.0;
  double ks_distance = 0.0;
  double ks_critical_95 = 0.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  double normalized_mean = 0.0;
  double normalized_variance = 0.0;
};

inline CltReport clt_test(std::span<const double> samples, long n, double sigma2) {
  if (!(sigma2 > 0.0)) throw DegenerateVarianceError("clt_test: sigma^2 must be positive");
  if (samples.empty()) throw ConfigError("clt_test: no samples");
  const double scale = 1.0 / std::sqrt(static_cast<double>(n) * sigma2);
  std::vector<double> z(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) z[i] = samples[i] * scale;
  const auto m = stats::moments(z);
  CltReport rep;
  rep.n = n;
  rep.n_traj = samples.size();
  rep.sigma2 = sigma2;
  rep.skewness = m.skewness;
  rep.excess_kurtosis = m.excess_kurtosis;
  rep.normalized_mean = m.mean;
  rep.normalized_variance = m.variance;
  rep.ks_distance = stats::ks_distance_normal(std::move(z));
  rep.ks_critical_95 = stats::ks_critical_95(samples.size());
  return rep;
}

inline CltReport clt_test(const EnsembleRun& run, double sigma2) { return clt_test(run.samples(), run.n(), sigma2); }

struct Interval {
  double a = 0.0;
  double b = 0.0;
  double length() const { return b - a; }
};

// rho_I = sigma sqrt(2 pi n) P(S_n f in I), which tends to |I|.
struct LltEntry {
  Interval interval;
  std::size_t count = 0;
  double expected_count = 0.0;
  double rho = 0.0;
  double rho_lo = 0.0;
  double rho_hi = 0.0;
  double rho_gaussian = 0.0;  // same functional under N(0, n sigma^2)
  bool low_count_warning = false;
};

struct LltReport {
  long n = 0;
  std::size_t n_traj = 0;
  double sigma = 0.0;
  std::vector<LltEntry> entries;
};

inline LltReport llt_test(std::span<const double> samples, long n, double sigma, const std::vector<Interval>& intervals) {
  if (!(sigma > 0.0)) throw DegenerateVarianceError("llt_test: sigma must be positive");
  for (const auto& I : intervals)
    if (!(I.b >= I.a) || !std::isfinite(I.a) || !std::isfinite(I.b))
      throw ConfigError("llt_test: intervals must be compact [a, b] with a <= b");
  const double scale = sigma * std::sqrt(2.0 * std::numbers::pi * static_cast<double>(n));
  const double sd = sigma * std::sqrt(static_cast<double>(n));
  LltReport rep;
  rep.n = n;
  rep.n_traj = samples.size();
  rep.sigma = sigma;
  for (const auto& I : intervals) {
    LltEntry e;
    e.interval = I;
    if (I.b > I.a)
      for (double s : samples) e.count += (s >= I.a && s <= I.b) ? 1 : 0;
    const double N = static_cast<double>(samples.size());
    e.rho = scale * static_cast<double>(e.count) / N;
    const auto [lo, hi] = stats::wilson_interval(e.count, samples.size());
    e.rho_lo = I.b > I.a ? scale * lo : 0.0;
    e.rho_hi = I.b > I.a ? scale * hi : 0.0;
    e.expected_count = N * I.length() / scale;
    e.low_count_warning = I.b > I.a && e.expected_count < 100.0;
    e.rho_gaussian = scale * (stats::normal_cdf(I.b / sd) - stats::normal_cdf(I.a / sd));
    rep.entries.push_back(e);
  }
  return rep;
}

inline LltReport llt_test(const EnsembleRun& run, double sigma, const std::vector<Interval>& intervals) {
  return llt_test(run.samples(), run.n(), sigma, intervals);
}

// Var(S_n f)/n along an increasing n_list; bounded Var(S_n f) (slope near -1
// on log-log axes) is the signature of a coboundary.
struct DegeneracyReport {
  std::vector<long> n_list;
  std::vector<double> var_over_n;
  std::vector<double> var_over_n_se;
  double slope = 0.0;
  bool all_zero = false;
  bool degenerate = false;
};

inline constexpr double kCoboundarySlope = -0.8;

inline DegeneracyReport degeneracy_scan(const EnsembleRun& run) {
  DegeneracyReport rep;
  rep.n_list = run.horizons;
  std::vector<double> lx, ly;
  for (long n : run.horizons) {
    const auto v = ensemble_variance(run, n);
    rep.var_over_n.push_back(v.value);
    rep.var_over_n_se.push_back(v.standard_error);
    if (v.value > 0.0) {
      lx.push_back(std::log(static_cast<double>(n)));
      ly.push_back(std::log(v.value));
    }
  }
  rep.all_zero = lx.empty();
  if (lx.size() >= 2) rep.slope = stats::linear_fit(lx, ly).slope;
  rep.degenerate = rep.all_zero || (lx.size() >= 2 && rep.slope <= kCoboundarySlope);
  return rep;
}

inline DegeneracyReport degeneracy_scan(const LatticeConfig& cfg, const Observable& f, std::vector<long> n_list,
                                        std::size_t n_traj, long n_burn, std::uint64_t seed, unsigned workers = 0) {
  if (!std::is_sorted(n_list.begin(), n_list.end()) ||
      std::adjacent_find(n_list.begin(), n_list.end()) != n_list.end())
    throw ConfigError("degeneracy_scan: n_list must be strictly increasing");
  return degeneracy_scan(run_ensemble(cfg, f, n_traj, std::move(n_list), n_burn, seed, workers));
}

}  // namespace cml
