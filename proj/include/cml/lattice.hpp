#pragma once

// Coupled map lattice on a finite torus (Z/LZ)^d:
//   T_eps = Phi_eps o T_0,  [T_0 x]_p = tau(x_p),  Phi_eps(x) = x + A_eps(x).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cml/error.hpp"
#include "cml/rng.hpp"
#include "cml/sitemap.hpp"

namespace cml {

using SiteCoord = std::vector<int>;

// Geometry of (Z/LZ)^d with row-major flat indices (axis 0 fastest) and a
// precomputed nearest-neighbour table.
class Torus {
 public:
  Torus(int d, int L) : d_(d), L_(L) {
    if (d < 1) throw ConfigError("lattice: dimension d must be positive");
    if (L < 1) throw ConfigError("lattice: side length L must be positive");
    size_ = 1;
    for (int a = 0; a < d; ++a) {
      if (size_ > (std::size_t{1} << 26) / static_cast<std::size_t>(L))
        throw ConfigError("lattice: L^d too large");
      size_ *= static_cast<std::size_t>(L);
    }
    neighbours_.resize(size_ * 2 * static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < size_; ++p) {
      auto c = coords(p);
      for (int a = 0; a < d; ++a) {
        for (int s = 0; s < 2; ++s) {
          auto q = c;
          q[static_cast<std::size_t>(a)] += s == 0 ? -1 : 1;
          neighbours_[p * 2 * static_cast<std::size_t>(d) + 2 * static_cast<std::size_t>(a) + static_cast<std::size_t>(s)] = flat(q);
        }
      }
    }
  }

  int dim() const { return d_; }
  int side() const { return L_; }
  std::size_t size() const { return size_; }

  std::size_t flat(const SiteCoord& c) const {
    if (c.size() != static_cast<std::size_t>(d_)) throw ConfigError("lattice: coordinate has wrong dimension");
    std::size_t idx = 0, stride = 1;
    for (int a = 0; a < d_; ++a) {
      const int w = ((c[static_cast<std::size_t>(a)] % L_) + L_) % L_;
      idx += static_cast<std::size_t>(w) * stride;
      stride *= static_cast<std::size_t>(L_);
    }
    return idx;
  }

  SiteCoord coords(std::size_t p) const {
    SiteCoord c(static_cast<std::size_t>(d_));
    for (int a = 0; a < d_; ++a) {
      c[static_cast<std::size_t>(a)] = static_cast<int>(p % static_cast<std::size_t>(L_));
      p /= static_cast<std::size_t>(L_);
    }
    return c;
  }

  // The 2d nearest neighbours of p (with multiplicity when L <= 2).
  std::span<const std::size_t> neighbours(std::size_t p) const {
    const auto k = 2 * static_cast<std::size_t>(d_);
    return {neighbours_.data() + p * k, k};
  }

  // l1 distance on the torus.
  int distance(std::size_t p, std::size_t q) const {
    int dist = 0;
    for (int a = 0; a < d_; ++a) {
      const int u = static_cast<int>(p % static_cast<std::size_t>(L_));
      const int v = static_cast<int>(q % static_cast<std::size_t>(L_));
      const int diff = std::abs(u - v);
      dist += std::min(diff, L_ - diff);
      p /= static_cast<std::size_t>(L_);
      q /= static_cast<std::size_t>(L_);
    }
    return dist;
  }

 private:
  int d_, L_;
  std::size_t size_ = 0;
  std::vector<std::size_t> neighbours_;
};

// A point of [0,1]^Lambda on the torus.
class LatticeState {
 public:
  LatticeState() = default;
  explicit LatticeState(std::vector<double> sites) : sites_(std::move(sites)) {}
  LatticeState(std::size_t n, double value) : sites_(n, value) {}

  std::size_t size() const { return sites_.size(); }
  double operator[](std::size_t p) const { return sites_[p]; }
  double& operator[](std::size_t p) { return sites_[p]; }
  std::span<const double> view() const { return sites_; }
  std::span<double> view() { return sites_; }
  const std::vector<double>& sites() const { return sites_; }

  bool in_unit_cube() const {
    return std::all_of(sites_.begin(), sites_.end(), [](double x) { return x >= 0.0 && x <= 1.0; });
  }

  friend bool operator==(const LatticeState&, const LatticeState&) = default;

 private:
  std::vector<double> sites_;
};

// Counts clamped coordinates of custom couplings that left [0, 1].
struct CouplingDiagnostics {
  std::atomic<std::uint64_t> clamped{0};
};

// Per-site increment rule x -> x + A_eps(x). Diffusive coupling reads only
// nearest neighbours; custom rules read the whole state and are checked for
// locality by verify_coupling_bounds.
class Coupling {
 public:
  enum class Kind { diffusive, custom };
  using Increment = std::function<double(std::span<const double> x, std::size_t site, double eps)>;

  static Coupling diffusive() { return Coupling(Kind::diffusive, {}, "diffusive"); }
  static Coupling custom(Increment rule, std::string name = "custom") {
    if (!rule) throw ConfigError("coupling: empty custom rule");
    return Coupling(Kind::custom, std::move(rule), std::move(name));
  }

  Kind kind() const { return kind_; }
  const std::string& name() const { return name_; }
  const Increment& rule() const { return rule_; }
  bool translation_invariant() const { return kind_ == Kind::diffusive; }

 private:
  Coupling(Kind k, Increment rule, std::string name)
      : kind_(k), rule_(std::move(rule)), name_(std::move(name)) {}

  Kind kind_;
  Increment rule_;
  std::string name_;
};

inline constexpr double kDefaultEpsMax = 0.05;

// Everything that defines T_eps on one torus.
class LatticeConfig {
 public:
  LatticeConfig(int d, int L, SiteMap map, Coupling coupling, double eps, int r,
                double eps_max = kDefaultEpsMax)
      : torus_(d, L), map_(std::move(map)), coupling_(std::move(coupling)), eps_(eps), r_(r),
        eps_max_(eps_max) {
    if (r < 1) throw ConfigError("lattice: coupling range r must be positive");
    if (L <= 2 * r) {
      std::ostringstream os;
      os << "lattice: L = " << L << " must exceed 2r = " << 2 * r;
      throw ConfigError(os.str());
    }
    if (!(eps >= 0.0)) throw ConfigError("lattice: eps must be nonnegative");
    if (eps > eps_max) {
      std::ostringstream os;
      os << "lattice: eps = " << eps << " exceeds eps_max = " << eps_max;
      throw ConfigError(os.str());
    }
    if (coupling_.kind() == Coupling::Kind::diffusive && r < 1)
      throw ConfigError("lattice: diffusive coupling needs r >= 1");
  }

  int d() const { return torus_.dim(); }
  int L() const { return torus_.side(); }
  int r() const { return r_; }
  double eps() const { return eps_; }
  double eps_max() const { return eps_max_; }
  std::size_t sites() const { return torus_.size(); }
  const Torus& torus() const { return torus_; }
  const SiteMap& map() const { return map_; }
  const Coupling& coupling() const { return coupling_; }

  LatticeConfig with_eps(double eps) const {
    return LatticeConfig(d(), L(), map_, coupling_, eps, r_, eps_max_);
  }
  LatticeConfig with_side(int L) const {
    return LatticeConfig(d(), L, map_, coupling_, eps_, r_, eps_max_);
  }

 private:
  Torus torus_;
  SiteMap map_;
  Coupling coupling_;
  double eps_;
  int r_;
  double eps_max_;
};

// Product-Lebesgue random state.
inline LatticeState random_state(const LatticeConfig& cfg, Stream& rng) {
  std::vector<double> x(cfg.sites());
  for (auto& v : x) v = rng.uniform();
  return LatticeState(std::move(x));
}

// (A_eps(x))_p without clamping.
inline double coupling_increment(const LatticeConfig& cfg, std::span<const double> x, std::size_t p) {
  if (cfg.coupling().kind() == Coupling::Kind::custom) return cfg.coupling().rule()(x, p, cfg.eps());
  double acc = 0.0;
  for (std::size_t q : cfg.torus().neighbours(p)) acc += x[q] - x[p];
  return cfg.eps() / (2.0 * cfg.d()) * acc;
}

// out = Phi_eps(in); in and out must not alias.
inline void apply_coupling_into(const LatticeConfig& cfg, std::span<const double> in, std::span<double> out,
                                CouplingDiagnostics* diag = nullptr) {
  const std::size_t n = in.size();
  if (cfg.coupling().kind() == Coupling::Kind::diffusive) {
    if (cfg.eps() == 0.0) {
      std::copy(in.begin(), in.end(), out.begin());
      return;
    }
    const double w = cfg.eps() / (2.0 * cfg.d());
    const auto& torus = cfg.torus();
    if (cfg.d() == 1) {
      const std::size_t L = n;
      for (std::size_t p = 0; p < L; ++p) {
        const double xl = in[p == 0 ? L - 1 : p - 1];
        const double xr = in[p + 1 == L ? 0 : p + 1];
        out[p] = std::clamp(in[p] + w * ((xl - in[p]) + (xr - in[p])), 0.0, 1.0);
      }
      return;
    }
    for (std::size_t p = 0; p < n; ++p) {
      double acc = 0.0;
      for (std::size_t q : torus.neighbours(p)) acc += in[q] - in[p];
      out[p] = std::clamp(in[p] + w * acc, 0.0, 1.0);
    }
    return;
  }
  for (std::size_t p = 0; p < n; ++p) {
    const double v = in[p] + cfg.coupling().rule()(in, p, cfg.eps());
    if (v < 0.0 || v > 1.0) {
      if (diag) diag->clamped.fetch_add(1, std::memory_order_relaxed);
      out[p] = std::clamp(v, 0.0, 1.0);
    } else {
      out[p] = v;
    }
  }
}

inline LatticeState apply_T0(const LatticeConfig& cfg, const LatticeState& s) {
  std::vector<double> out(s.size());
  for (std::size_t p = 0; p < s.size(); ++p) out[p] = cfg.map()(s[p]);
  return LatticeState(std::move(out));
}

inline LatticeState apply_coupling(const LatticeConfig& cfg, const LatticeState& s,
                                   CouplingDiagnostics* diag = nullptr) {
  std::vector<double> out(s.size());
  apply_coupling_into(cfg, s.view(), out, diag);
  return LatticeState(std::move(out));
}

// In-place T_eps using a caller-owned scratch buffer of the same size.
inline void step_inplace(const LatticeConfig& cfg, std::span<double> x, std::span<double> scratch,
                         CouplingDiagnostics* diag = nullptr) {
  const auto& map = cfg.map();
  for (std::size_t p = 0; p < x.size(); ++p) scratch[p] = map.eval_unchecked(x[p]);
  apply_coupling_into(cfg, scratch, x, diag);
}

inline LatticeState step(const LatticeConfig& cfg, const LatticeState& s, CouplingDiagnostics* diag = nullptr) {
  if (s.size() != cfg.sites()) throw ConfigError("step: state size does not match the lattice");
  return apply_coupling(cfg, apply_T0(cfg, s), diag);
}

// Finite-difference audit of the coupling assumptions
//   |A_p| <= 2 eps, |dA_q/dx_p| <= 2 eps, |d^2 A_q/dx_k dx_p| <= 2 eps,
//   d Phi_q / d x_p = 0 for |p - q| > r.
struct BoundsReport {
  double bound = 0.0;  // 2 eps + 1e-4
  double sup_increment = 0.0;
  double sup_jacobian = 0.0;
  double sup_second = 0.0;
  bool increment_ok = true;
  bool jacobian_ok = true;
  bool second_ok = true;
  double max_nonlocal_derivative = 0.0;
  bool locality_ok = true;
  std::optional<std::pair<std::size_t, std::size_t>> locality_violation;  // (q, p)

  bool ok() const { return increment_ok && jacobian_ok && second_ok && locality_ok; }
};

inline BoundsReport verify_coupling_bounds(const LatticeConfig& cfg, int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw ConfigError("verify_coupling_bounds: need at least one sample");
  constexpr double h1 = 1e-6;
  constexpr double h2 = 1e-4;
  constexpr double locality_tol = 1e-8;
  const auto& torus = cfg.torus();
  const std::size_t n = cfg.sites();
  BoundsReport rep;
  rep.bound = 2.0 * cfg.eps() + 1e-4;

  for (int s = 0; s < n_samples; ++s) {
    Stream rng(seed, static_cast<std::uint64_t>(s), StreamDomain::coupling_probe);
    std::vector<double> x(n);
    for (auto& v : x) v = rng.uniform(h2, 1.0 - h2);
    auto A = [&](std::size_t q) { return coupling_increment(cfg, x, q); };

    for (std::size_t q = 0; q < n; ++q) rep.sup_increment = std::max(rep.sup_increment, std::abs(A(q)));

    for (std::size_t p = 0; p < n; ++p) {
      const double xp = x[p];
      std::vector<double> plus(n), minus(n);
      x[p] = xp + h1;
      for (std::size_t q = 0; q < n; ++q) plus[q] = A(q);
      x[p] = xp - h1;
      for (std::size_t q = 0; q < n; ++q) minus[q] = A(q);
      x[p] = xp;
      for (std::size_t q = 0; q < n; ++q) {
        const double dA = (plus[q] - minus[q]) / (2.0 * h1);
        const double dPhi = dA + (p == q ? 1.0 : 0.0);
        rep.sup_jacobian = std::max(rep.sup_jacobian, std::abs(dA));
        if (torus.distance(p, q) > cfg.r() && std::abs(dPhi) > rep.max_nonlocal_derivative) {
          rep.max_nonlocal_derivative = std::abs(dPhi);
          if (rep.max_nonlocal_derivative > locality_tol) rep.locality_violation = std::make_pair(q, p);
        }
      }
    }

    // Mixed second differences inside the declared range of each target.
    for (std::size_t q = 0; q < n; ++q) {
      for (std::size_t p = 0; p < n; ++p) {
        if (torus.distance(p, q) > cfg.r()) continue;
        for (std::size_t k = 0; k < n; ++k) {
          if (torus.distance(k, q) > cfg.r()) continue;
          const double xp = x[p], xk = x[k];
          auto eval = [&](double sp, double sk) {
            x[p] = xp;
            x[k] = xk;
            x[p] += sp * h2;
            x[k] += sk * h2;
            return A(q);
          };
          const double d2 = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4.0 * h2 * h2);
          x[p] = xp;
          x[k] = xk;
          rep.sup_second = std::max(rep.sup_second, std::abs(d2));
        }
      }
    }
  }
  rep.increment_ok = rep.sup_increment <= rep.bound;
  rep.jacobian_ok = rep.sup_jacobian <= rep.bound;
  rep.second_ok = rep.sup_second <= rep.bound;
  rep.locality_ok = rep.max_nonlocal_derivative <= locality_tol;
  if (rep.locality_ok) rep.locality_violation.reset();
  return rep;
}

// {"d":1,"L":64,"eps":0.02,"r":1,"coupling":"diffusive","map":{...}|"zigzag3", "eps_max":0.05}
inline LatticeConfig lattice_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"d", "L", "eps", "r", "coupling", "map", "eps_max"}, "lattice");
  try {
    const int d = j.value("d", 1);
    const int L = j.at("L").get<int>();
    const double eps = j.value("eps", 0.0);
    const int r = j.value("r", 1);
    const double eps_max = j.value("eps_max", kDefaultEpsMax);
    const auto coupling = j.value("coupling", std::string("diffusive"));
    if (coupling != "diffusive") throw ConfigError("lattice: only the diffusive coupling is configurable from JSON");
    SiteMap map = j.contains("map") ? sitemap_from_json(j.at("map")) : SiteMap::zigzag3();
    return LatticeConfig(d, L, std::move(map), Coupling::diffusive(), eps, r, eps_max);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("lattice: ") + e.what());
  }
}

inline nlohmann::json to_json(const LatticeConfig& cfg) {
  return {{"d", cfg.d()},   {"L", cfg.L()},
          {"eps", cfg.eps()}, {"r", cfg.r()},
          {"coupling", cfg.coupling().name()}, {"map", to_json(cfg.map())},
          {"eps_max", cfg.eps_max()}};
}

}  // namespace cml
