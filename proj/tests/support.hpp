#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary. Nothing here calls the code
// paths it is used to check.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "cml/rng.hpp"
#include "cml/sitemap.hpp"

namespace oracle {

using cml::cplx;

// Preimage interval of [y0, y1] under the linear branch y = a x + b,
// intersected with [lo, hi]; returns its length.
inline double preimage_overlap(double a, double b, double lo, double hi, double y0, double y1) {
  double u = (y0 - b) / a, v = (y1 - b) / a;
  if (u > v) std::swap(u, v);
  return std::max(0.0, std::min(hi, v) - std::max(lo, u));
}

// Dense Ulam matrix of a piecewise-linear map on M uniform cells from
// preimage lengths: P[i][j] = M * |cell_j intersect tau^{-1}(cell_i)|.
inline std::vector<std::vector<double>> ulam_by_preimages(const cml::SiteMap& map, int M) {
  std::vector<std::vector<double>> P(M, std::vector<double>(M, 0.0));
  const auto& z = map.singularities();
  for (std::size_t b = 0; b < map.branch_count(); ++b) {
    const auto& lin = std::get<cml::LinearBranch>(map.branches()[b]);
    for (int j = 0; j < M; ++j) {
      const double lo = std::max(z[b], double(j) / M), hi = std::min(z[b + 1], double(j + 1) / M);
      if (hi <= lo) continue;
      for (int i = 0; i < M; ++i)
        P[i][j] += M * preimage_overlap(lin.slope, lin.intercept, lo, hi, double(i) / M, double(i + 1) / M);
    }
  }
  return P;
}

// int_0^1 d(x) phi(tau(x)) dx for piecewise-constant d and phi on the same
// uniform grid: each cell is cut at the preimages of the grid points and the
// midpoint rule is exact on every piece.
inline cplx pullback_integral(const cml::SiteMap& map, const std::vector<cplx>& d, const std::vector<cplx>& phi) {
  const int M = static_cast<int>(d.size());
  cplx acc = 0.0;
  for (int j = 0; j < M; ++j) {
    const double lo = double(j) / M, hi = double(j + 1) / M;
    std::vector<double> cuts{lo, hi};
    for (double zz : map.singularities())
      if (zz > lo && zz < hi) cuts.push_back(zz);
    for (std::size_t b = 0; b < map.branch_count(); ++b) {
      const auto& lin = std::get<cml::LinearBranch>(map.branches()[b]);
      for (int g = 0; g <= M; ++g) {
        const double x = (double(g) / M - lin.intercept) / lin.slope;
        if (x > lo && x < hi) cuts.push_back(x);
      }
    }
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
      const double w = cuts[c + 1] - cuts[c];
      if (w <= 0.0) continue;
      const double y = map.eval_unchecked(0.5 * (cuts[c] + cuts[c + 1]));
      const int cell = std::min(M - 1, static_cast<int>(std::floor(y * M)));
      acc += d[j] * phi[cell] * w;
    }
  }
  return acc;
}

// Composite Simpson rule on n panels of each of `pieces` equal subintervals.
inline double simpson(const std::function<double(double)>& g, int pieces, int n) {
  double total = 0.0;
  for (int p = 0; p < pieces; ++p) {
    const double a = double(p) / pieces, b = double(p + 1) / pieces, h = (b - a) / n;
    double s = g(a) + g(b);
    for (int i = 1; i < n; ++i) s += g(a + i * h) * (i % 2 ? 4.0 : 2.0);
    total += s * h / 3.0;
  }
  return total;
}

// C_k = int (x - 1/2)(tau^k x - 1/2) dx for zigzag3 by quadrature on the
// 3^k linear pieces of tau^k.
inline double zigzag3_autocov(int k) {
  const auto map = cml::SiteMap::zigzag3();
  auto g = [&](double x) {
    double y = x;
    for (int i = 0; i < k; ++i) y = map.eval_unchecked(y);
    return (x - 0.5) * (y - 0.5);
  };
  int pieces = 1;
  for (int i = 0; i < k; ++i) pieces *= 3;
  return simpson(g, pieces, 8);
}

}  // namespace oracle
