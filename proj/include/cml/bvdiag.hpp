#pragma once

// Bounded-variation diagnostics for piecewise-constant densities. A density
// is extended by zero outside [0, 1], so the two boundary jumps count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cml/error.hpp"
#include "cml/rng.hpp"
#include "cml/sitemap.hpp"

namespace cml {

// |v_0| + sum_j |v_{j+1} - v_j| + |v_{M-1}|
inline double variation(const PCDensity& d) {
  const auto& v = d.values();
  double var = std::abs(v.front()) + std::abs(v.back());
  for (std::size_t j = 1; j < v.size(); ++j) var += std::abs(v[j] - v[j - 1]);
  return var;
}

// Total-variation norm of the measure d dm.
inline double total_mass_norm(const PCDensity& d) {
  double m = 0.0;
  for (std::size_t j = 0; j < d.cells(); ++j) m += std::abs(d[j]) * d.width(j);
  return m;
}

inline PCDensity absolute_value(const PCDensity& d) {
  std::vector<cplx> out(d.cells());
  std::transform(d.values().begin(), d.values().end(), out.begin(),
                 [](cplx z) { return cplx{std::abs(z), 0.0}; });
  return PCDensity(d.grid(), std::move(out));
}

// Cellwise product with u sampled at cell centers.
template <class Fn>
PCDensity lipschitz_multiply(const PCDensity& d, Fn&& u) {
  std::vector<cplx> out(d.cells());
  for (std::size_t j = 0; j < d.cells(); ++j) out[j] = d[j] * u(d.center(j));
  return PCDensity(d.grid(), std::move(out));
}

// Right-hand side sup|u| Var(d) + Lip(u) |d| + 2 Lip(u) / M of the
// multiplication bound; the last term absorbs center sampling on M cells.
inline double lipschitz_bound(const PCDensity& d, double sup_u, double lip_u) {
  return sup_u * variation(d) + lip_u * total_mass_norm(d) +
         2.0 * lip_u / static_cast<double>(d.cells());
}

// Density on a uniform nx-by-ny grid of [0, 1]^2; value(i, j) with i along
// axis 0.
class PCDensity2D {
 public:
  PCDensity2D(std::size_t nx, std::size_t ny, std::vector<cplx> values)
      : nx_(nx), ny_(ny), values_(std::move(values)) {
    if (nx_ == 0 || ny_ == 0 || values_.size() != nx_ * ny_)
      throw ConfigError("PCDensity2D: size mismatch");
  }

  std::size_t nx() const { return nx_; }
  std::size_t ny() const { return ny_; }
  cplx operator()(std::size_t i, std::size_t j) const { return values_[i + nx_ * j]; }
  const std::vector<cplx>& values() const { return values_; }

  // Slice along `axis` at a fixed index of the other axis.
  PCDensity slice(int axis, std::size_t at) const {
    const std::size_t n = axis == 0 ? nx_ : ny_;
    std::vector<cplx> v(n);
    for (std::size_t s = 0; s < n; ++s) v[s] = axis == 0 ? (*this)(s, at) : (*this)(at, s);
    return PCDensity(PCDensity::uniform_grid(n), std::move(v));
  }

 private:
  std::size_t nx_, ny_;
  std::vector<cplx> values_;
};

// Variation in one coordinate: 1D variations of the slices integrated over
// the other coordinate.
inline double axis_variation(const PCDensity2D& d, int axis) {
  const std::size_t other = axis == 0 ? d.ny() : d.nx();
  double acc = 0.0;
  for (std::size_t s = 0; s < other; ++s) acc += variation(d.slice(axis, s));
  return acc / static_cast<double>(other);
}

// Supremum over the two coordinates.
inline double variation(const PCDensity2D& d) {
  return std::max(axis_variation(d, 0), axis_variation(d, 1));
}

inline double total_mass_norm(const PCDensity2D& d) {
  double m = 0.0;
  for (const auto& v : d.values()) m += std::abs(v);
  return m / static_cast<double>(d.values().size());
}

inline PCDensity2D absolute_value(const PCDensity2D& d) {
  std::vector<cplx> out(d.values().size());
  std::transform(d.values().begin(), d.values().end(), out.begin(),
                 [](cplx z) { return cplx{std::abs(z), 0.0}; });
  return PCDensity2D(d.nx(), d.ny(), std::move(out));
}

// Random test densities of several shapes on a uniform grid with M cells.
inline PCDensity random_density(Stream& rng, std::size_t M, bool complex_values) {
  std::vector<cplx> v(M);
  const int shape = static_cast<int>(rng.below(5));
  auto draw = [&](double scale) {
    return complex_values ? cplx(rng.uniform(-scale, scale), rng.uniform(-scale, scale))
                          : cplx(rng.uniform(-scale, scale), 0.0);
  };
  switch (shape) {
    case 0:  // i.i.d. values
      for (auto& x : v) x = draw(1.0);
      break;
    case 1: {  // random walk
      cplx s = draw(1.0);
      for (auto& x : v) x = (s += draw(0.2));
      break;
    }
    case 2: {  // few spikes
      for (int i = 0; i < 3; ++i) v[rng.below(M)] += draw(5.0);
      break;
    }
    case 3: {  // indicator of a random interval
      const std::size_t a = rng.below(M), b = a + rng.below(M - a) + 1;
      const cplx h = draw(2.0);
      for (std::size_t i = a; i < b; ++i) v[i] = h;
      break;
    }
    default: {  // smooth plus noise, nonnegative
      const double w = rng.uniform(1.0, 10.0);
      for (std::size_t i = 0; i < M; ++i)
        v[i] = 1.0 + std::sin(w * (double(i) + 0.5) / double(M)) + 0.1 * rng.uniform();
      break;
    }
  }
  return PCDensity(PCDensity::uniform_grid(M), std::move(v));
}

// One inequality checked across the randomized suite; slack is lhs - rhs,
// so a violation is slack > tol.
struct BvCheck {
  std::string name;
  long checked = 0;
  long violations = 0;
  double worst_slack = -std::numeric_limits<double>::infinity();

  void record(double lhs, double rhs, double tol) {
    ++checked;
    worst_slack = std::max(worst_slack, lhs - rhs);
    if (lhs - rhs > tol) ++violations;
  }
};

struct BvSuiteReport {
  long instances = 0;
  double ly_coefficient = 0.0;
  double ly_constant = 0.0;
  std::vector<BvCheck> checks;

  long violations() const {
    long v = 0;
    for (const auto& c : checks) v += c.violations;
    return v;
  }
};

inline constexpr double kBvTolerance = 1e-12;

// Randomized checks on PCDensity instances with 1..M_max cells:
//   Var|d| <= Var d, |d| <= Var d / 2, Var(u d) <= lipschitz_bound,
//   |s| homogeneity and the triangle inequality of Var, and
//   Var(P d) <= (2 / inf|tau'|) Var d + C |d| on grids where transfer_apply
//   is exact (instances whose grid the map does not align with are skipped).
inline BvSuiteReport run_bv_suite(const SiteMap& map, long n_instances, std::size_t M_max, double ly_constant,
                                  std::uint64_t seed) {
  if (n_instances < 1) throw ConfigError("bv suite: need at least one instance");
  if (M_max < 1) throw ConfigError("bv suite: M_max must be positive");
  BvSuiteReport rep;
  rep.instances = n_instances;
  rep.ly_coefficient = 2.0 / map.min_slope();
  rep.ly_constant = ly_constant;
  rep.checks = {{"abs_value"}, {"two_norms"}, {"lipschitz_multiply"}, {"homogeneity"}, {"triangle"},
                {"lasota_yorke"}};
  for (long trial = 0; trial < n_instances; ++trial) {
    Stream rng(seed, static_cast<std::uint64_t>(trial), StreamDomain::bv_suite);
    const std::size_t M = 1 + rng.below(M_max);
    const auto d = random_density(rng, M, trial % 3 == 0);
    const auto e = random_density(rng, M, trial % 3 == 1);
    const double vd = variation(d);

    rep.checks[0].record(variation(absolute_value(d)), vd, kBvTolerance);
    rep.checks[1].record(total_mass_norm(d), 0.5 * vd, kBvTolerance);

    const double a = rng.uniform(-2, 2), w = rng.uniform(0, 20), phase = rng.uniform(0, 6.3), c = rng.uniform(-1, 1);
    const auto ud = lipschitz_multiply(d, [&](double x) { return a * std::sin(w * x + phase) + c; });
    rep.checks[2].record(variation(ud), lipschitz_bound(d, std::abs(a) + std::abs(c), std::abs(a) * w), kBvTolerance);

    const cplx s(rng.uniform(-3, 3), rng.uniform(-3, 3));
    std::vector<cplx> sd(M), sum(M);
    for (std::size_t i = 0; i < M; ++i) {
      sd[i] = s * d[i];
      sum[i] = d[i] + e[i];
    }
    // two-sided: record |difference| against a relative rounding allowance
    rep.checks[3].record(std::abs(variation(PCDensity(d.grid(), sd)) - std::abs(s) * vd), 0.0, 1e-10 * (1 + vd));
    rep.checks[4].record(variation(PCDensity(d.grid(), sum)), vd + variation(e), kBvTolerance);

    try {
      const auto Pd = transfer_apply(map, d);
      rep.checks[5].record(variation(Pd), rep.ly_coefficient * vd + ly_constant * total_mass_norm(d), kBvTolerance);
    } catch (const AlignmentError&) {
    }
  }
  return rep;
}

}  // namespace cml
