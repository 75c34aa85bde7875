#pragma once

// Single-site piecewise expanding interval maps and their exact transfer
// operator on piecewise-constant densities.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cml/error.hpp"

namespace cml {

using cplx = std::complex<double>;

// tau(x) = slope * x + intercept on the branch interval.
struct LinearBranch {
  double slope = 0.0;
  double intercept = 0.0;
};

// tau(x) = sum_k coeffs[k] * x^k on the branch interval.
struct PolynomialBranch {
  std::vector<double> coeffs;
};

using Branch = std::variant<LinearBranch, PolynomialBranch>;

namespace detail {

inline double horner(const std::vector<double>& c, double x) {
  double acc = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * x + *it;
  return acc;
}

inline std::vector<double> differentiate(const std::vector<double>& c) {
  if (c.size() <= 1) return {0.0};
  std::vector<double> d(c.size() - 1);
  for (std::size_t k = 1; k < c.size(); ++k) d[k - 1] = static_cast<double>(k) * c[k];
  return d;
}

}  // namespace detail

inline double branch_value(const Branch& b, double x) {
  if (const auto* lin = std::get_if<LinearBranch>(&b)) return lin->slope * x + lin->intercept;
  return detail::horner(std::get<PolynomialBranch>(b).coeffs, x);
}

inline double branch_derivative(const Branch& b, double x) {
  if (const auto* lin = std::get_if<LinearBranch>(&b)) return lin->slope;
  return detail::horner(detail::differentiate(std::get<PolynomialBranch>(b).coeffs), x);
}

inline double branch_second_derivative(const Branch& b, double x) {
  if (std::holds_alternative<LinearBranch>(b)) return 0.0;
  const auto& c = std::get<PolynomialBranch>(b).coeffs;
  return detail::horner(detail::differentiate(detail::differentiate(c)), x);
}

inline constexpr double kDomainTolerance = 1e-12;

// Continuous piecewise monotone C^2 map of [0, 1]. Branch j lives on
// [zeta_j, zeta_{j+1}]. Immutable after construction.
class SiteMap {
 public:
  SiteMap(std::vector<double> singularities, std::vector<Branch> branches)
      : zeta_(std::move(singularities)), branches_(std::move(branches)) {
    if (zeta_.size() < 2) throw ConfigError("SiteMap: need at least two singularities (0 and 1)");
    if (zeta_.front() != 0.0 || zeta_.back() != 1.0)
      throw ConfigError("SiteMap: singularities must start at 0 and end at 1");
    for (std::size_t j = 1; j < zeta_.size(); ++j)
      if (!(zeta_[j] > zeta_[j - 1])) throw ConfigError("SiteMap: singularities must be strictly increasing");
    if (branches_.size() != zeta_.size() - 1)
      throw ConfigError("SiteMap: expected one branch per interval");
    linear_ = true;
    for (const auto& b : branches_) {
      if (const auto* p = std::get_if<PolynomialBranch>(&b)) {
        if (p->coeffs.empty()) throw ConfigError("SiteMap: polynomial branch without coefficients");
        linear_ = false;
      } else {
        slope_.push_back(std::get<LinearBranch>(b).slope);
        intercept_.push_back(std::get<LinearBranch>(b).intercept);
      }
    }
    min_slope_ = compute_min_slope();
  }

  // Canonical instance: slopes 3, -3, 3 on thirds of [0, 1].
  static SiteMap zigzag3() { return zigzag(3); }

  // Continuous full-branch map with s alternating-orientation branches of slope s.
  static SiteMap zigzag(int s) {
    if (s < 1) throw ConfigError("SiteMap::zigzag: need at least one branch");
    std::vector<double> z(static_cast<std::size_t>(s) + 1);
    std::vector<Branch> br;
    for (int j = 0; j <= s; ++j) z[static_cast<std::size_t>(j)] = static_cast<double>(j) / s;
    z.back() = 1.0;
    for (int j = 0; j < s; ++j) {
      if (j % 2 == 0)
        br.push_back(LinearBranch{static_cast<double>(s), -static_cast<double>(j)});
      else
        br.push_back(LinearBranch{-static_cast<double>(s), static_cast<double>(j + 1)});
    }
    return SiteMap(std::move(z), std::move(br));
  }

  // 1 - |2x - 1|; slope exactly 2.
  static SiteMap tent() {
    return SiteMap({0.0, 0.5, 1.0}, {LinearBranch{2.0, 0.0}, LinearBranch{-2.0, 2.0}});
  }

  const std::vector<double>& singularities() const { return zeta_; }
  const std::vector<Branch>& branches() const { return branches_; }
  std::size_t branch_count() const { return branches_.size(); }
  bool piecewise_linear() const { return linear_; }

  // Cached inf |tau'|: exact for linear branches, sampled (257 points per
  // branch) for polynomial ones.
  double min_slope() const { return min_slope_; }

  // Right-continuous branch lookup; x = 1 belongs to the last branch.
  std::size_t branch_of(double x) const {
    if (x >= 1.0) return branches_.size() - 1;
    const auto it = std::upper_bound(zeta_.begin(), zeta_.end(), x);
    const auto idx = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - zeta_.begin() - 1, 0));
    return std::min(idx, branches_.size() - 1);
  }

  // tau(x), x assumed in [0, 1].
  double eval_unchecked(double x) const {
    if (linear_) {
      // hot path: branchless count of interior breakpoints <= x (x is random,
      // so a search mispredicts); same arithmetic as branch_value
      std::size_t b = 0;
      const std::size_t last = slope_.size() - 1;
      for (std::size_t j = 1; j <= last; ++j) b += static_cast<std::size_t>(x >= zeta_[j]);
      return std::clamp(slope_[b] * x + intercept_[b], 0.0, 1.0);
    }
    const double y = branch_value(branches_[branch_of(x)], x);
    return std::clamp(y, 0.0, 1.0);
  }

  double operator()(double x) const { return eval_unchecked(check_domain(x)); }

  double derivative(double x) const {
    x = check_domain(x);
    return branch_derivative(branches_[branch_of(x)], x);
  }

  double second_derivative(double x) const {
    x = check_domain(x);
    return branch_second_derivative(branches_[branch_of(x)], x);
  }

  bool increasing(std::size_t b) const {
    const double mid = 0.5 * (zeta_[b] + zeta_[b + 1]);
    return branch_derivative(branches_[b], mid) > 0.0;
  }

 private:
  static double check_domain(double x) {
    if (!(x >= -kDomainTolerance && x <= 1.0 + kDomainTolerance)) {
      std::ostringstream os;
      os << "SiteMap: argument " << x << " outside [0, 1]";
      throw DomainError(os.str());
    }
    return std::clamp(x, 0.0, 1.0);
  }

  double compute_min_slope() const {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      if (const auto* lin = std::get_if<LinearBranch>(&branches_[b])) {
        m = std::min(m, std::abs(lin->slope));
        continue;
      }
      constexpr int samples = 257;
      for (int i = 0; i < samples; ++i) {
        const double x = zeta_[b] + (zeta_[b + 1] - zeta_[b]) * i / (samples - 1);
        m = std::min(m, std::abs(branch_derivative(branches_[b], x)));
      }
    }
    return m;
  }

  std::vector<double> zeta_;
  std::vector<Branch> branches_;
  std::vector<double> slope_, intercept_;  // linear maps only
  bool linear_ = true;
  double min_slope_ = 0.0;
};

// Outcome of probing a SiteMap against the standing assumptions.
struct ValidationReport {
  bool continuous = true;
  bool expanding = true;
  bool in_range = true;
  bool monotone = true;
  double min_sampled_slope = std::numeric_limits<double>::infinity();
  std::optional<double> continuity_failure_at;
  std::optional<double> expansion_failure_at;
  std::optional<double> range_failure_at;
  std::optional<double> monotonicity_failure_at;

  bool ok() const { return continuous && expanding && in_range && monotone; }
};

inline constexpr double kContinuityTolerance = 1e-10;

// Probes n_probe equispaced points per branch (endpoints included, branch
// formula evaluated on the closed interval).
inline ValidationReport validate(const SiteMap& map, int n_probe) {
  if (n_probe < 2) throw ConfigError("validate: need at least two probe points per branch");
  ValidationReport rep;
  const auto& z = map.singularities();
  const auto& br = map.branches();
  for (std::size_t j = 1; j + 1 < z.size(); ++j) {
    const double left = branch_value(br[j - 1], z[j]);
    const double right = branch_value(br[j], z[j]);
    if (std::abs(left - right) > kContinuityTolerance && rep.continuous) {
      rep.continuous = false;
      rep.continuity_failure_at = z[j];
    }
  }
  for (std::size_t b = 0; b < br.size(); ++b) {
    const double sign_ref = branch_derivative(br[b], 0.5 * (z[b] + z[b + 1])) >= 0.0 ? 1.0 : -1.0;
    for (int i = 0; i < n_probe; ++i) {
      const double x = z[b] + (z[b + 1] - z[b]) * i / (n_probe - 1);
      const double y = branch_value(br[b], x);
      const double dy = branch_derivative(br[b], x);
      rep.min_sampled_slope = std::min(rep.min_sampled_slope, std::abs(dy));
      if (!(std::abs(dy) > 2.0) && rep.expanding) {
        rep.expanding = false;
        rep.expansion_failure_at = x;
      }
      if ((y < -kDomainTolerance || y > 1.0 + kDomainTolerance) && rep.in_range) {
        rep.in_range = false;
        rep.range_failure_at = x;
      }
      if (!(dy * sign_ref > 0.0) && rep.monotone) {
        rep.monotone = false;
        rep.monotonicity_failure_at = x;
      }
    }
  }
  return rep;
}

// Piecewise-constant complex density on a partition of [0, 1].
class PCDensity {
 public:
  PCDensity(std::vector<double> grid, std::vector<cplx> values)
      : grid_(std::move(grid)), values_(std::move(values)) {
    if (grid_.size() < 2 || values_.size() + 1 != grid_.size())
      throw ConfigError("PCDensity: need M+1 breakpoints for M values");
    if (grid_.front() != 0.0 || grid_.back() != 1.0)
      throw ConfigError("PCDensity: grid must span [0, 1]");
    for (std::size_t j = 1; j < grid_.size(); ++j)
      if (!(grid_[j] > grid_[j - 1])) throw ConfigError("PCDensity: grid must be strictly increasing");
  }

  PCDensity(std::vector<double> grid, const std::vector<double>& real_values)
      : PCDensity(std::move(grid), std::vector<cplx>(real_values.begin(), real_values.end())) {}

  static std::vector<double> uniform_grid(std::size_t cells) {
    if (cells == 0) throw ConfigError("PCDensity: zero cells");
    std::vector<double> g(cells + 1);
    for (std::size_t j = 0; j <= cells; ++j) g[j] = static_cast<double>(j) / static_cast<double>(cells);
    g.back() = 1.0;
    return g;
  }

  static PCDensity uniform(std::size_t cells, cplx value = 1.0) {
    return PCDensity(uniform_grid(cells), std::vector<cplx>(cells, value));
  }

  std::size_t cells() const { return values_.size(); }
  double width(std::size_t j) const { return grid_[j + 1] - grid_[j]; }
  double center(std::size_t j) const { return 0.5 * (grid_[j] + grid_[j + 1]); }
  const std::vector<double>& grid() const { return grid_; }
  const std::vector<cplx>& values() const { return values_; }
  std::vector<cplx>& values() { return values_; }
  cplx operator[](std::size_t j) const { return values_[j]; }

  cplx mass() const {
    cplx m = 0.0;
    for (std::size_t j = 0; j < values_.size(); ++j) m += values_[j] * width(j);
    return m;
  }

  bool same_grid(const PCDensity& o) const { return grid_ == o.grid_; }

 private:
  std::vector<double> grid_;
  std::vector<cplx> values_;
};

// Where one cell lands under its (linear) branch: the half-open range of
// target cells [first, last) and the factor 1/|slope| applied to the value.
struct CellImage {
  std::size_t first = 0;
  std::size_t last = 0;
  double jacobian = 0.0;
};

namespace detail {

inline std::size_t locate_breakpoint(const std::vector<double>& grid, double y) {
  constexpr double tol = 1e-12;
  const auto it = std::lower_bound(grid.begin(), grid.end(), y - tol);
  if (it == grid.end() || std::abs(*it - y) > tol) {
    std::ostringstream os;
    os << "transfer: branch image endpoint " << y << " is not a grid breakpoint";
    throw AlignmentError(os.str());
  }
  return static_cast<std::size_t>(it - grid.begin());
}

}  // namespace detail

// Cell-to-cells map of a piecewise-linear SiteMap on an aligned grid. Throws
// AlignmentError if some cell straddles a singularity or some cell image is
// not a union of grid cells.
inline std::vector<CellImage> cell_images(const SiteMap& map, const std::vector<double>& grid) {
  if (!map.piecewise_linear())
    throw AlignmentError("transfer: exact transfer needs a piecewise-linear map");
  constexpr double tol = 1e-12;
  const auto& z = map.singularities();
  std::vector<CellImage> out(grid.size() - 1);
  for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
    const double lo = grid[j], hi = grid[j + 1];
    const std::size_t b = map.branch_of(0.5 * (lo + hi));
    if (lo < z[b] - tol || hi > z[b + 1] + tol) {
      std::ostringstream os;
      os << "transfer: cell [" << lo << ", " << hi << "] straddles a singularity";
      throw AlignmentError(os.str());
    }
    const auto& lin = std::get<LinearBranch>(map.branches()[b]);
    double y0 = lin.slope * lo + lin.intercept;
    double y1 = lin.slope * hi + lin.intercept;
    if (y0 > y1) std::swap(y0, y1);
    const std::size_t first = detail::locate_breakpoint(grid, y0);
    const std::size_t last = detail::locate_breakpoint(grid, y1);
    if (last <= first) throw AlignmentError("transfer: degenerate cell image");
    out[j] = CellImage{first, last, 1.0 / std::abs(lin.slope)};
  }
  return out;
}

// Exact pushforward (P_tau d)(y) = sum_b d(v_b(y)) |v_b'(y)| for
// piecewise-linear maps on aligned grids.
inline PCDensity transfer_apply(const SiteMap& map, const PCDensity& d) {
  const auto images = cell_images(map, d.grid());
  std::vector<cplx> out(d.cells(), cplx{0.0});
  for (std::size_t j = 0; j < d.cells(); ++j) {
    const cplx v = d[j] * images[j].jacobian;
    for (std::size_t i = images[j].first; i < images[j].last; ++i) out[i] += v;
  }
  return PCDensity(d.grid(), std::move(out));
}

// JSON form: {"singularities":[...], "branches":[{"kind":"linear","a":..,"b":..}
// | {"kind":"expr","poly":[c0, c1, ...]}]}.
inline nlohmann::json to_json(const SiteMap& map) {
  nlohmann::json j;
  j["singularities"] = map.singularities();
  auto arr = nlohmann::json::array();
  for (const auto& b : map.branches()) {
    if (const auto* lin = std::get_if<LinearBranch>(&b))
      arr.push_back({{"kind", "linear"}, {"a", lin->slope}, {"b", lin->intercept}});
    else
      arr.push_back({{"kind", "expr"}, {"poly", std::get<PolynomialBranch>(b).coeffs}});
  }
  j["branches"] = std::move(arr);
  return j;
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

}  // namespace detail

// Accepts the object form above or one of the preset names "zigzag3",
// "zigzagN" (N branches), "tent".
inline SiteMap sitemap_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "tent") return SiteMap::tent();
    if (name.rfind("zigzag", 0) == 0 && name.size() > 6) {
      try {
        return SiteMap::zigzag(std::stoi(name.substr(6)));
      } catch (const std::logic_error&) {
      }
    }
    throw ConfigError("map: unknown preset '" + name + "'");
  }
  detail::reject_unknown_keys(j, {"singularities", "branches"}, "map");
  try {
    auto z = j.at("singularities").get<std::vector<double>>();
    std::vector<Branch> br;
    for (const auto& b : j.at("branches")) {
      const auto kind = b.at("kind").get<std::string>();
      if (kind == "linear") {
        detail::reject_unknown_keys(b, {"kind", "a", "b"}, "map.branches[linear]");
        br.push_back(LinearBranch{b.at("a").get<double>(), b.at("b").get<double>()});
      } else if (kind == "expr") {
        detail::reject_unknown_keys(b, {"kind", "poly"}, "map.branches[expr]");
        br.push_back(PolynomialBranch{b.at("poly").get<std::vector<double>>()});
      } else {
        throw ConfigError("map: unknown branch kind '" + kind + "'");
      }
    }
    return SiteMap(std::move(z), std::move(br));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("map: ") + e.what());
  }
}

}  // namespace cml
