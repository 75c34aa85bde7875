#pragma once

// Lipschitz observables depending on finitely many lattice coordinates.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cml/error.hpp"
#include "cml/lattice.hpp"
#include "cml/rng.hpp"

namespace cml {

// f(x) = kernel(x restricted to the support) - offset. The kernel only ever
// sees the support values, so f cannot read anything else.
class Observable {
 public:
  using Kernel = std::function<double(std::span<const double>)>;

  Observable(std::string name, std::vector<SiteCoord> support, std::vector<double> lipschitz, Kernel kernel,
             double offset = 0.0)
      : name_(std::move(name)),
        support_(std::move(support)),
        lipschitz_(std::move(lipschitz)),
        kernel_(std::move(kernel)),
        offset_(offset) {
    if (!kernel_) throw ConfigError("observable: empty kernel");
    if (lipschitz_.size() != support_.size())
      throw ConfigError("observable: one Lipschitz constant per support site");
  }

  const std::string& name() const { return name_; }
  const std::vector<SiteCoord>& support() const { return support_; }
  const std::vector<double>& lipschitz() const { return lipschitz_; }
  double offset() const { return offset_; }

  Observable with_offset(double c) const {
    Observable o = *this;
    o.offset_ = c;
    return o;
  }

  double on_support(std::span<const double> values) const { return kernel_(values) - offset_; }

  double operator()(const LatticeConfig& cfg, std::span<const double> x) const {
    double buf[8];
    std::vector<double> heap;
    double* vals = buf;
    if (support_.size() > 8) {
      heap.resize(support_.size());
      vals = heap.data();
    }
    for (std::size_t i = 0; i < support_.size(); ++i) vals[i] = x[cfg.torus().flat(support_[i])];
    return on_support({vals, support_.size()});
  }

  double operator()(const LatticeConfig& cfg, const LatticeState& s) const { return (*this)(cfg, s.view()); }

  // Support resolved to flat indices of one torus, for hot loops.
  class Bound {
   public:
    Bound(const Observable& f, const Torus& torus) : f_(&f) {
      for (const auto& c : f.support()) idx_.push_back(torus.flat(c));
      vals_.resize(idx_.size());
    }
    double operator()(std::span<const double> x) {
      for (std::size_t i = 0; i < idx_.size(); ++i) vals_[i] = x[idx_[i]];
      return f_->on_support(vals_);
    }

   private:
    const Observable* f_;
    std::vector<std::size_t> idx_;
    std::vector<double> vals_;
  };

  Bound bind(const Torus& torus) const { return Bound(*this, torus); }

 private:
  std::string name_;
  std::vector<SiteCoord> support_;
  std::vector<double> lipschitz_;
  Kernel kernel_;
  double offset_ = 0.0;
};

namespace observables {

inline Observable coordinate(SiteCoord site) {
  return Observable("coordinate", {std::move(site)}, {1.0}, [](std::span<const double> v) { return v[0]; });
}

inline Observable cos_coordinate(SiteCoord site) {
  return Observable("cos_coordinate", {std::move(site)}, {2.0 * std::numbers::pi},
                    [](std::span<const double> v) { return std::cos(2.0 * std::numbers::pi * v[0]); });
}

inline Observable product(SiteCoord a, SiteCoord b) {
  return Observable("product", {std::move(a), std::move(b)}, {1.0, 1.0},
                    [](std::span<const double> v) { return v[0] * v[1]; });
}

inline Observable constant(double c) {
  return Observable("constant", {}, {}, [c](std::span<const double>) { return c; });
}

inline Observable zero() { return constant(0.0); }

// f = u - u o T_eps with u = x_site. Needs the diffusive coupling: the
// kernel reproduces one lattice step locally on the r = 1 neighbourhood.
inline Observable coboundary_of_coordinate(const LatticeConfig& cfg, SiteCoord site) {
  if (cfg.coupling().kind() != Coupling::Kind::diffusive)
    throw ConfigError("coboundary observable: only implemented for the diffusive coupling");
  const int d = cfg.d();
  std::vector<SiteCoord> support{site};
  for (int a = 0; a < d; ++a) {
    for (int s : {-1, 1}) {
      auto q = site;
      q[static_cast<std::size_t>(a)] += s;
      support.push_back(q);
    }
  }
  const double eps = cfg.eps();
  const double w = eps / (2.0 * d);
  const double slope_sup = [&] {
    double m = 0.0;
    const auto& map = cfg.map();
    for (int i = 0; i <= 1024; ++i) m = std::max(m, std::abs(map.derivative(i / 1024.0)));
    return m;
  }();
  std::vector<double> lip(support.size(), w * slope_sup);
  lip[0] = 1.0 + (1.0 - eps) * slope_sup;
  SiteMap map = cfg.map();
  return Observable("coboundary", std::move(support), std::move(lip), [map, w](std::span<const double> v) {
    const double y0 = map.eval_unchecked(v[0]);
    double acc = 0.0;
    for (std::size_t i = 1; i < v.size(); ++i) acc += map.eval_unchecked(v[i]) - y0;
    const double next = std::clamp(y0 + w * acc, 0.0, 1.0);
    return v[0] - next;
  });
}

}  // namespace observables

// S_n f(s0) = sum_{k<n} f(T^k s0).
inline double birkhoff_sum(const Observable& f, const LatticeConfig& cfg, const LatticeState& s0, long n) {
  if (n < 0) throw ConfigError("birkhoff_sum: negative horizon");
  if (s0.size() != cfg.sites()) throw ConfigError("birkhoff_sum: state size does not match the lattice");
  std::vector<double> x = s0.sites(), scratch(x.size());
  auto fb = f.bind(cfg.torus());
  double sum = 0.0;
  for (long k = 0; k < n; ++k) {
    sum += fb(x);
    step_inplace(cfg, x, scratch);
  }
  return sum;
}

// Time average of f along one trajectory from a product-Lebesgue start,
// after n_burn discarded steps.
inline double time_average(const Observable& f, const LatticeConfig& cfg, long n_burn, long n_est,
                           std::uint64_t seed) {
  if (n_est < 1) throw ConfigError("time_average: need n_est >= 1");
  Stream rng(seed, 0, StreamDomain::centering);
  auto x = random_state(cfg, rng).sites();
  std::vector<double> scratch(x.size());
  for (long k = 0; k < n_burn; ++k) step_inplace(cfg, x, scratch);
  auto fb = f.bind(cfg.torus());
  double sum = 0.0;
  for (long k = 0; k < n_est; ++k) {
    sum += fb(x);
    step_inplace(cfg, x, scratch);
  }
  return sum / static_cast<double>(n_est);
}

// Returns f - c with c the empirical mean of f under mu_eps; an existing
// offset is kept and corrected, so repeated calls only move c by noise.
inline Observable center(const Observable& f, const LatticeConfig& cfg, long n_burn, long n_est,
                         std::uint64_t seed) {
  const double mean = time_average(f, cfg, n_burn, n_est, seed);
  return f.with_offset(f.offset() + mean);
}

}  // namespace cml
