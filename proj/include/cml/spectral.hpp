#pragma once

// Ulam discretisation of the coupled transfer operator, twisted operators
// and their leading eigendata.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cml/ensemble.hpp"
#include "cml/error.hpp"
#include "cml/lattice.hpp"
#include "cml/observable.hpp"
#include "cml/parallel.hpp"
#include "cml/rng.hpp"
#include "cml/sitemap.hpp"
#include "cml/sparse.hpp"
#include "cml/stats.hpp"

namespace cml {

enum class UlamMethod { exact, monte_carlo };

inline const char* to_string(UlamMethod m) { return m == UlamMethod::exact ? "exact" : "monte_carlo"; }

inline constexpr int kMinSamplesPerCell = 10;
inline constexpr std::size_t kDenseLimit = 4096;

// Sparse stochastic matrix on the product grid of k modeled sites with N
// cells each. Flat cell index has site 0 fastest. Modeled sites are
// (0, 0, ..), (1, 0, ..), ..., (k-1, 0, ..) of the configuration's torus.
class UlamOperator {
 public:
  UlamOperator(int k, int N, SparseMatrix m, UlamMethod method, int samples_per_cell,
               std::vector<std::size_t> modeled_flat)
      : k_(k), N_(N), matrix_(std::make_shared<const SparseMatrix>(std::move(m))), method_(method),
        samples_(samples_per_cell), modeled_(std::move(modeled_flat)) {}

  int k() const { return k_; }
  int N() const { return N_; }
  std::size_t cells() const { return matrix_->size(); }
  const SparseMatrix& matrix() const { return *matrix_; }
  UlamMethod method() const { return method_; }
  int samples_per_cell() const { return samples_; }
  const std::vector<std::size_t>& modeled_sites() const { return modeled_; }

  // Per-site cell index of flat cell c.
  std::size_t site_cell(std::size_t c, int site) const {
    for (int s = 0; s < site; ++s) c /= static_cast<std::size_t>(N_);
    return c % static_cast<std::size_t>(N_);
  }
  double site_center(std::size_t c, int site) const {
    return (static_cast<double>(site_cell(c, site)) + 0.5) / N_;
  }

  // Allowed deviation of column sums from 1.
  double column_sum_tolerance() const {
    return method_ == UlamMethod::exact ? 1e-12 : 3.0 / std::sqrt(static_cast<double>(samples_));
  }

  void write_matrix_market(std::ostream& os) const { matrix_->write_matrix_market(os); }

 private:
  int k_;
  int N_;
  std::shared_ptr<const SparseMatrix> matrix_;
  UlamMethod method_;
  int samples_;
  std::vector<std::size_t> modeled_;
};

namespace detail {

inline std::vector<std::size_t> modeled_flat_sites(const LatticeConfig& cfg, int k) {
  std::vector<std::size_t> out;
  for (int i = 0; i < k; ++i) {
    SiteCoord c(static_cast<std::size_t>(cfg.d()), 0);
    c[0] = i;
    out.push_back(cfg.torus().flat(c));
  }
  return out;
}

inline std::size_t cell_of(double y, int N) {
  const auto c = static_cast<long>(std::floor(y * N));
  return static_cast<std::size_t>(std::clamp<long>(c, 0, N - 1));
}

inline SparseMatrix single_site_exact(const SiteMap& map, int N) {
  const auto grid = PCDensity::uniform_grid(static_cast<std::size_t>(N));
  const auto images = cell_images(map, grid);
  std::vector<Triplet> t;
  for (std::size_t j = 0; j < images.size(); ++j)
    for (std::size_t i = images[j].first; i < images[j].last; ++i) t.push_back({i, j, images[j].jacobian});
  return SparseMatrix(static_cast<std::size_t>(N), std::move(t));
}

// One column of the heat-bath closure: sample points of cell c, push them
// one lattice step with fresh Lebesgue values on every unmodeled site, and
// histogram the modeled sites' images.
class HeatBathSampler {
 public:
  HeatBathSampler(const LatticeConfig& cfg, int k, int N) : cfg_(&cfg), k_(k), N_(N) {
    modeled_ = modeled_flat_sites(cfg, k);
    local_ = cfg.coupling().kind() == Coupling::Kind::diffusive;
    if (local_) {
      // Sites whose values enter the modeled images: modeled plus neighbours.
      needed_ = modeled_;
      for (std::size_t p : modeled_)
        for (std::size_t q : cfg.torus().neighbours(p)) needed_.push_back(q);
      std::sort(needed_.begin(), needed_.end());
      needed_.erase(std::unique(needed_.begin(), needed_.end()), needed_.end());
      pos_.assign(cfg.sites(), 0);
      for (std::size_t i = 0; i < needed_.size(); ++i) pos_[needed_[i]] = i;
      vals_.resize(needed_.size());
      img_.resize(needed_.size());
      is_modeled_.assign(needed_.size(), -1);
      for (int s = 0; s < k; ++s) is_modeled_[pos_[modeled_[static_cast<std::size_t>(s)]]] = s;
    } else {
      x_.resize(cfg.sites());
      scratch_.resize(cfg.sites());
    }
  }

  std::vector<Triplet> column(std::size_t c, int samples, std::uint64_t seed) {
    Stream rng(seed, c, StreamDomain::ulam_cell);
    std::vector<double> lo(static_cast<std::size_t>(k_));
    std::size_t rest = c;
    for (int s = 0; s < k_; ++s) {
      lo[static_cast<std::size_t>(s)] = static_cast<double>(rest % static_cast<std::size_t>(N_)) / N_;
      rest /= static_cast<std::size_t>(N_);
    }
    const double h = 1.0 / N_;
    std::vector<std::size_t> targets(static_cast<std::size_t>(samples));
    const auto& map = cfg_->map();
    for (int n = 0; n < samples; ++n) {
      std::size_t target = 0, stride = 1;
      if (local_) {
        for (std::size_t i = 0; i < needed_.size(); ++i) {
          const int s = is_modeled_[i];
          vals_[i] = s >= 0 ? lo[static_cast<std::size_t>(s)] + h * rng.uniform() : rng.uniform();
          img_[i] = map.eval_unchecked(vals_[i]);
        }
        const double w = cfg_->eps() / (2.0 * cfg_->d());
        for (int s = 0; s < k_; ++s) {
          const std::size_t p = modeled_[static_cast<std::size_t>(s)];
          const double yp = img_[pos_[p]];
          double acc = 0.0;
          for (std::size_t q : cfg_->torus().neighbours(p)) acc += img_[pos_[q]] - yp;
          const double y = std::clamp(yp + w * acc, 0.0, 1.0);
          target += stride * cell_of(y, N_);
          stride *= static_cast<std::size_t>(N_);
        }
      } else {
        for (auto& v : x_) v = rng.uniform();
        for (int s = 0; s < k_; ++s)
          x_[modeled_[static_cast<std::size_t>(s)]] = lo[static_cast<std::size_t>(s)] + h * rng.uniform();
        step_inplace(*cfg_, x_, scratch_);
        for (int s = 0; s < k_; ++s) {
          target += stride * cell_of(x_[modeled_[static_cast<std::size_t>(s)]], N_);
          stride *= static_cast<std::size_t>(N_);
        }
      }
      targets[static_cast<std::size_t>(n)] = target;
    }
    std::sort(targets.begin(), targets.end());
    std::vector<Triplet> out;
    const double inv = 1.0 / samples;
    for (std::size_t a = 0; a < targets.size();) {
      std::size_t b = a;
      while (b < targets.size() && targets[b] == targets[a]) ++b;
      out.push_back({targets[a], c, static_cast<double>(b - a) * inv});
      a = b;
    }
    return out;
  }

 private:
  const LatticeConfig* cfg_;
  int k_, N_;
  bool local_ = false;
  std::vector<std::size_t> modeled_, needed_, pos_;
  std::vector<int> is_modeled_;
  std::vector<double> vals_, img_, x_, scratch_;
};

}  // namespace detail

// exact: eps = 0 and a piecewise-linear map on an aligned grid; the k-site
// operator is the Kronecker power of the single-site one.
// monte_carlo: heat-bath closure, any cfg with L >= 2r + k.
inline UlamOperator build_ulam(const LatticeConfig& cfg, int k, int N, int samples_per_cell, std::uint64_t seed,
                               UlamMethod method = UlamMethod::monte_carlo, unsigned workers = 1) {
  if (k < 1 || k > 3) throw ConfigError("build_ulam: k must be 1, 2 or 3");
  if (N < 1) throw ConfigError("build_ulam: N must be positive");
  if (k > cfg.L()) throw ConfigError("build_ulam: more modeled sites than the torus side");
  auto modeled = detail::modeled_flat_sites(cfg, k);
  std::size_t cells = 1;
  for (int s = 0; s < k; ++s) cells *= static_cast<std::size_t>(N);

  if (method == UlamMethod::exact) {
    if (cfg.eps() != 0.0) throw ConfigError("build_ulam: exact mode needs eps = 0");
    if (N == 1) return UlamOperator(k, N, SparseMatrix(1, {{0, 0, 1.0}}), method, 0, std::move(modeled));
    SparseMatrix one = detail::single_site_exact(cfg.map(), N);
    SparseMatrix m = one;
    for (int s = 1; s < k; ++s) m = kron(one, m);
    return UlamOperator(k, N, std::move(m), method, 0, std::move(modeled));
  }

  if (samples_per_cell < kMinSamplesPerCell) {
    std::ostringstream os;
    os << "build_ulam: samples_per_cell = " << samples_per_cell << " is below " << kMinSamplesPerCell;
    throw ConfigError(os.str());
  }
  if (cfg.L() < 2 * cfg.r() + k) {
    std::ostringstream os;
    os << "build_ulam: heat-bath closure needs L >= 2r + k = " << 2 * cfg.r() + k;
    throw ConfigError(os.str());
  }
  if (N == 1) return UlamOperator(k, N, SparseMatrix(1, {{0, 0, 1.0}}), method, samples_per_cell, std::move(modeled));

  std::vector<std::vector<Triplet>> cols(cells);
  parallel_for(cells, workers, [&](std::size_t begin, std::size_t end) {
    detail::HeatBathSampler sampler(cfg, k, N);
    for (std::size_t c = begin; c < end; ++c) cols[c] = sampler.column(c, samples_per_cell, seed);
  });
  std::vector<Triplet> all;
  for (auto& col : cols) all.insert(all.end(), col.begin(), col.end());
  return UlamOperator(k, N, SparseMatrix(cells, std::move(all)), method, samples_per_cell, std::move(modeled));
}

// ---------------------------------------------------------------------------
// Eigen-iteration plumbing.

namespace detail {

using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

struct RitzPairs {
  std::vector<cplx> values;  // by decreasing modulus
  CMat vectors;              // unit columns
  std::vector<double> residuals;
  int iterations = 0;
};

inline CMat orthonormal_basis(const CMat& Z) {
  Eigen::HouseholderQR<CMat> qr(Z);
  return qr.householderQ() * CMat::Identity(Z.rows(), Z.cols());
}

// Block subspace iteration with Rayleigh-Ritz. Stops once the top `want`
// Ritz pairs have residual <= tol.
template <class Apply>
RitzPairs subspace_iteration(Apply&& apply, const CMat& start, int want, double tol, int max_iter) {
  const Eigen::Index n = start.rows(), p = start.cols();
  CMat Q = orthonormal_basis(start);
  CMat Z(n, p);
  RitzPairs out;
  for (int it = 1; it <= max_iter; ++it) {
    for (Eigen::Index j = 0; j < p; ++j) {
      CVec y(n);
      apply(Q.col(j), y);
      Z.col(j) = y;
    }
    const CMat H = Q.adjoint() * Z;
    Eigen::ComplexEigenSolver<CMat> es(H);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return std::abs(es.eigenvalues()(a)) > std::abs(es.eigenvalues()(b));
    });
    out.values.clear();
    out.residuals.clear();
    out.vectors.resize(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
      const Eigen::Index o = order[static_cast<std::size_t>(j)];
      CVec y = es.eigenvectors().col(o);
      y.normalize();
      const cplx mu = es.eigenvalues()(o);
      out.values.push_back(mu);
      out.vectors.col(j) = Q * y;
      out.residuals.push_back((Z * y - mu * (Q * y)).norm());
    }
    out.iterations = it;
    bool done = true;
    for (int j = 0; j < want; ++j) done = done && out.residuals[static_cast<std::size_t>(j)] <= tol;
    if (done) return out;
    Q = orthonormal_basis(Z);
  }
  std::ostringstream os;
  os << "subspace iteration: no convergence after " << max_iter << " iterations (residual "
     << out.residuals.front() << ")";
  throw ConvergenceError(os.str());
}

inline CMat random_block(std::size_t n, int p, std::uint64_t seed) {
  CMat B(static_cast<Eigen::Index>(n), p);
  for (int j = 0; j < p; ++j) {
    Stream rng(seed, static_cast<std::uint64_t>(j), StreamDomain::radius_start);
    for (std::size_t i = 0; i < n; ++i) B(static_cast<Eigen::Index>(i), j) = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
  }
  return B;
}

inline double overlap(const CVec& a, const CVec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::abs(a.dot(b)) / (na * nb);
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct StationaryDensity {
  std::vector<double> mass;     // per cell, sums to 1
  std::vector<double> density;  // mass / cell volume
  double residual = 0.0;        // l1 norm of P h - h
  int iterations = 0;
};

// Power iteration from `start` (uniform if empty) until ||P h - h||_1 <= tol.
inline StationaryDensity stationary_density(const UlamOperator& op, double tol = 1e-12, int max_iter = 100000,
                                            std::vector<double> start = {}, unsigned workers = 1) {
  const std::size_t n = op.cells();
  if (start.empty()) start.assign(n, 1.0);
  if (start.size() != n) throw ConfigError("stationary_density: start vector has the wrong size");
  double s = 0.0;
  for (double v : start) {
    if (v < 0.0) throw ConfigError("stationary_density: start vector must be nonnegative");
    s += v;
  }
  if (!(s > 0.0)) throw ConfigError("stationary_density: start vector has zero mass");
  std::vector<double> h(n), next(n);
  for (std::size_t i = 0; i < n; ++i) h[i] = start[i] / s;
  StationaryDensity out;
  for (int it = 1; it <= max_iter; ++it) {
    op.matrix().multiply<double>(h, next, workers);
    double total = 0.0;
    for (double v : next) total += v;
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] /= total;
      res += std::abs(next[i] - h[i]);
    }
    std::swap(h, next);
    if (res <= tol) {
      out.iterations = it;
      out.residual = res;
      out.mass = h;
      out.density.resize(n);
      for (std::size_t i = 0; i < n; ++i) out.density[i] = h[i] * static_cast<double>(n);
      return out;
    }
  }
  throw ConvergenceError("stationary_density: power iteration did not reach the residual tolerance");
}

struct SpectralGap {
  double lambda2_modulus = 0.0;
  double gap = 1.0;
  std::vector<cplx> eigenvalues;  // leading ones of the full operator, 1 first
};

// |lambda_2| by subspace iteration on P - h 1^T, which moves the eigenvalue 1
// to 0 and keeps the rest of the spectrum.
inline SpectralGap spectral_gap(const UlamOperator& op, int n_eigs = 4, double tol = 1e-10, int max_iter = 20000,
                                std::uint64_t seed = 1, unsigned workers = 1) {
  const std::size_t n = op.cells();
  SpectralGap g;
  if (n == 1) {
    g.eigenvalues = {1.0};
    return g;
  }
  const auto h = stationary_density(op, 1e-13, 100000, {}, workers).mass;
  const int p = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(std::max(n_eigs, 2)), n));
  std::vector<cplx> xin(n), yout(n);
  auto apply = [&](const auto& x, detail::CVec& y) {
    for (std::size_t i = 0; i < n; ++i) xin[i] = x(static_cast<Eigen::Index>(i));
    op.matrix().multiply<cplx>(xin, yout, workers);
    cplx mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) mass += yout[i];
    for (std::size_t i = 0; i < n; ++i) y(static_cast<Eigen::Index>(i)) = yout[i] - h[i] * mass;
  };
  const auto ritz = detail::subspace_iteration(apply, detail::random_block(n, p, seed), 1, tol, max_iter);
  g.lambda2_modulus = std::abs(ritz.values.front());
  g.gap = 1.0 - g.lambda2_modulus;
  g.eigenvalues.push_back(1.0);
  for (int j = 0; j + 1 < p; ++j) g.eigenvalues.push_back(ritz.values[static_cast<std::size_t>(j)]);
  return g;
}

// Dense eigenvalues for small operators (oracle use).
inline std::vector<cplx> dense_eigenvalues(const SparseMatrix& m) {
  if (m.size() > kDenseLimit) throw ConfigError("dense_eigenvalues: operator too large for the dense solver");
  Eigen::MatrixXd A(static_cast<Eigen::Index>(m.size()), static_cast<Eigen::Index>(m.size()));
  const auto d = m.dense();
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d[i][j];
  Eigen::EigenSolver<Eigen::MatrixXd> es(A, false);
  std::vector<cplx> ev(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
  std::sort(ev.begin(), ev.end(), [](cplx a, cplx b) { return std::abs(a) > std::abs(b); });
  return ev;
}

// ---------------------------------------------------------------------------
// Twisted operators.

// Values of f at the cell centres of op, in flat cell order.
inline std::vector<double> observable_on_cells(const UlamOperator& op, const Observable& f, const Torus& torus) {
  std::vector<int> slot;
  for (const auto& s : f.support()) {
    const std::size_t flat = torus.flat(s);
    const auto it = std::find(op.modeled_sites().begin(), op.modeled_sites().end(), flat);
    if (it == op.modeled_sites().end()) {
      std::ostringstream os;
      os << "twist: observable '" << f.name() << "' reads a site outside the " << op.k() << " modeled sites";
      throw SupportError(os.str());
    }
    slot.push_back(static_cast<int>(it - op.modeled_sites().begin()));
  }
  std::vector<double> out(op.cells());
  std::vector<double> v(slot.size());
  for (std::size_t c = 0; c < op.cells(); ++c) {
    for (std::size_t i = 0; i < slot.size(); ++i) v[i] = op.site_center(c, slot[i]);
    out[c] = f.on_support(v);
  }
  return out;
}

// P_t x = P(e^{itf} x): the base matrix times a diagonal of unit phases.
class TwistedOperator {
 public:
  TwistedOperator(UlamOperator base, double t, std::vector<cplx> phase)
      : base_(std::move(base)), t_(t), phase_(std::move(phase)) {}

  const UlamOperator& base() const { return base_; }
  double t() const { return t_; }
  const std::vector<cplx>& phase() const { return phase_; }
  std::size_t size() const { return base_.cells(); }

  cplx entry(std::size_t i, std::size_t j) const { return base_.matrix().at(i, j) * phase_[j]; }

  void apply(std::span<const cplx> x, std::span<cplx> y, std::vector<cplx>& scratch, unsigned workers = 1) const {
    scratch.resize(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) scratch[j] = phase_[j] * x[j];
    base_.matrix().multiply<cplx>(scratch, y, workers);
  }

  // y = P_t^T x, for left eigenvectors.
  void apply_transpose(std::span<const cplx> x, std::span<cplx> y) const {
    base_.matrix().multiply_transpose<cplx>(x, y);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] *= phase_[j];
  }

 private:
  UlamOperator base_;
  double t_;
  std::vector<cplx> phase_;
};

inline TwistedOperator twist(const UlamOperator& op, const std::vector<double>& f_cells, double t) {
  std::vector<cplx> ph(op.cells());
  for (std::size_t c = 0; c < ph.size(); ++c) ph[c] = t == 0.0 ? cplx(1.0, 0.0) : std::polar(1.0, t * f_cells[c]);
  return TwistedOperator(op, t, std::move(ph));
}

inline TwistedOperator twist(const UlamOperator& op, const Observable& f, const Torus& torus, double t) {
  return twist(op, observable_on_cells(op, f, torus), t);
}

// f minus its mean under the Ulam stationary mass.
inline Observable center_on_ulam(const UlamOperator& op, const Observable& f, const Torus& torus,
                                 unsigned workers = 1) {
  const auto h = stationary_density(op, 1e-13, 100000, {}, workers).mass;
  const auto fc = observable_on_cells(op, f, torus);
  double m = 0.0;
  for (std::size_t c = 0; c < fc.size(); ++c) m += h[c] * fc[c];
  return f.with_offset(f.offset() + m);
}

struct LeadingEigen {
  cplx lambda;
  detail::CVec vector;  // unit right eigenvector
  double overlap = 1.0;
  double radius = 0.0;
  detail::CMat block;  // converged Ritz block, for warm starts
};

namespace detail {

inline constexpr int kTrackBlock = 3;
inline constexpr double kTieTolerance = 1e-9;

inline LeadingEigen leading_eigen(const TwistedOperator& P, const CMat& start, const CVec* previous, double tol,
                                  int max_iter, unsigned workers) {
  const std::size_t n = P.size();
  std::vector<cplx> xin(n), yout(n), scratch;
  auto apply = [&](const auto& x, CVec& y) {
    for (std::size_t i = 0; i < n; ++i) xin[i] = x(static_cast<Eigen::Index>(i));
    P.apply(xin, yout, scratch, workers);
    for (std::size_t i = 0; i < n; ++i) y(static_cast<Eigen::Index>(i)) = yout[i];
  };
  const auto ritz = subspace_iteration(apply, start, 1, tol, max_iter);
  std::size_t pick = 0;
  if (previous) {
    const double top = std::abs(ritz.values.front());
    double best = -1.0;
    for (std::size_t j = 0; j < ritz.values.size(); ++j) {
      if (std::abs(ritz.values[j]) < top * (1.0 - kTieTolerance)) break;
      const double ov = overlap(ritz.vectors.col(static_cast<Eigen::Index>(j)), *previous);
      if (ov > best) {
        best = ov;
        pick = j;
      }
    }
  }
  LeadingEigen out;
  out.lambda = ritz.values[pick];
  out.vector = ritz.vectors.col(static_cast<Eigen::Index>(pick));
  out.radius = std::abs(ritz.values.front());
  out.overlap = previous ? overlap(out.vector, *previous) : 1.0;
  out.block = ritz.vectors;
  if (pick != 0) out.block.col(0).swap(out.block.col(static_cast<Eigen::Index>(pick)));
  return out;
}

inline CMat initial_block(std::size_t n, std::uint64_t seed) {
  CMat B = random_block(n, kTrackBlock, seed);
  B.col(0).setConstant(cplx(1.0, 0.0));
  return B;
}

}  // namespace detail

inline constexpr double kMinOverlap = 0.9;
inline constexpr double kDefaultDerivativeStep = 1.0 / 64.0;

struct EigenCurve {
  std::vector<double> t;
  std::vector<cplx> lambda;
  std::vector<double> overlap;
  std::vector<double> radius;
  double h = kDefaultDerivativeStep;
  cplx lambda_prime = 0.0;   // lambda'(0)
  cplx lambda_second = 0.0;  // lambda''(0)

  // lambda'(0)^2 - lambda''(0): equals -lambda''(0) for centred f and does
  // not care about a residual mean.
  double sigma2() const { return std::real(lambda_prime * lambda_prime - lambda_second); }

  void write_csv(std::ostream& os) const {
    os << "t,re_lambda,im_lambda,abs_lambda,radius_estimate\n";
    char buf[160];
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g\n", t[i], lambda[i].real(), lambda[i].imag(),
                    std::abs(lambda[i]), radius[i]);
      os << buf;
    }
  }
};

// Leading eigenvalue of P_t along t_grid, tracked outward from t = 0 with
// warm starts; derivatives at 0 from central differences at h and 2h
// combined by Richardson extrapolation, h being the grid spacing next to 0.
inline EigenCurve lambda_curve(const UlamOperator& op, const std::vector<double>& f_cells,
                               std::vector<double> t_grid, double tol = 1e-12, unsigned workers = 1,
                               int max_iter = 20000) {
  std::sort(t_grid.begin(), t_grid.end());
  t_grid.erase(std::unique(t_grid.begin(), t_grid.end()), t_grid.end());
  const auto zero = std::find(t_grid.begin(), t_grid.end(), 0.0);
  if (zero == t_grid.end()) throw ConfigError("lambda_curve: t_grid must contain 0");
  const auto i0 = static_cast<std::size_t>(zero - t_grid.begin());
  const std::size_t n = op.cells();

  EigenCurve c;
  c.t = t_grid;
  c.lambda.assign(t_grid.size(), 0.0);
  c.overlap.assign(t_grid.size(), 1.0);
  c.radius.assign(t_grid.size(), 0.0);

  const auto at0 = detail::leading_eigen(twist(op, f_cells, 0.0), detail::initial_block(n, 7), nullptr, tol,
                                         max_iter, workers);
  c.lambda[i0] = at0.lambda;
  c.radius[i0] = at0.radius;

  auto sweep = [&](long dir) {
    LeadingEigen prev = at0;
    for (long i = static_cast<long>(i0) + dir; i >= 0 && i < static_cast<long>(t_grid.size()); i += dir) {
      const auto u = static_cast<std::size_t>(i);
      auto cur = detail::leading_eigen(twist(op, f_cells, t_grid[u]), prev.block, &prev.vector, tol, max_iter,
                                       workers);
      if (cur.overlap < kMinOverlap) {
        std::ostringstream os;
        os << "lambda_curve: eigenvector overlap " << cur.overlap << " < " << kMinOverlap << " between t = "
           << t_grid[static_cast<std::size_t>(i - dir)] << " and t = " << t_grid[u] << "; use a finer t grid";
        throw BranchTrackingError(os.str());
      }
      c.lambda[u] = cur.lambda;
      c.overlap[u] = cur.overlap;
      c.radius[u] = cur.radius;
      prev = std::move(cur);
    }
  };
  sweep(+1);
  sweep(-1);

  double h = kDefaultDerivativeStep;
  if (i0 + 1 < t_grid.size()) h = t_grid[i0 + 1];
  if (i0 > 0) h = std::min(h, -t_grid[i0 - 1]);
  c.h = h;
  cplx v[5];  // t = -2h, -h, 0, h, 2h
  const double ts[5] = {-2 * h, -h, 0.0, h, 2 * h};
  for (int j = 0; j < 5; ++j) {
    if (j == 2) {
      v[j] = at0.lambda;
      continue;
    }
    v[j] = detail::leading_eigen(twist(op, f_cells, ts[j]), at0.block, &at0.vector, tol, max_iter, workers).lambda;
  }
  const cplx d1h = (v[3] - v[1]) / (2 * h), d1_2h = (v[4] - v[0]) / (4 * h);
  const cplx d2h = (v[3] - 2.0 * v[2] + v[1]) / (h * h), d2_2h = (v[4] - 2.0 * v[2] + v[0]) / (4 * h * h);
  c.lambda_prime = (4.0 * d1h - d1_2h) / 3.0;
  c.lambda_second = (4.0 * d2h - d2_2h) / 3.0;
  return c;
}

inline EigenCurve lambda_curve(const UlamOperator& op, const Observable& f, const Torus& torus,
                               std::vector<double> t_grid, double tol = 1e-12, unsigned workers = 1) {
  return lambda_curve(op, observable_on_cells(op, f, torus), std::move(t_grid), tol, workers);
}

struct RadiusEstimate {
  double t = 0.0;
  double radius = 0.0;
};

inline constexpr int kRadiusStarts = 3;

// rho(P_t) from the growth of ||P_t^m v|| over the second half of n_power
// steps, maximised over three random starts.
inline std::vector<RadiusEstimate> spectral_radius_map(const UlamOperator& op, const std::vector<double>& f_cells,
                                                       const std::vector<double>& t_grid, int n_power,
                                                       std::uint64_t seed = 1, unsigned workers = 1) {
  if (n_power < 2) throw ConfigError("spectral_radius_map: n_power must be at least 2");
  const std::size_t n = op.cells();
  std::vector<RadiusEstimate> out;
  std::vector<cplx> x(n), y(n), scratch;
  for (double t : t_grid) {
    const auto P = twist(op, f_cells, t);
    double best = 0.0;
    for (int s = 0; s < kRadiusStarts; ++s) {
      Stream rng(seed, static_cast<std::uint64_t>(s), StreamDomain::radius_start);
      for (auto& v : x) v = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
      double log_norm = 0.0, log_half = 0.0;
      const int half = n_power / 2;
      bool dead = false;
      for (int m = 1; m <= n_power; ++m) {
        P.apply(x, y, scratch, workers);
        double nrm = 0.0;
        for (const auto& v : y) nrm += std::norm(v);
        nrm = std::sqrt(nrm);
        if (nrm == 0.0) {
          dead = true;
          break;
        }
        log_norm += std::log(nrm);
        for (std::size_t i = 0; i < n; ++i) x[i] = y[i] / nrm;
        if (m == half) log_half = log_norm;
      }
      const double rate = dead ? 0.0 : std::exp((log_norm - log_half) / static_cast<double>(n_power - half));
      best = std::max(best, rate);
    }
    out.push_back({t, best});
  }
  return out;
}

inline std::vector<RadiusEstimate> spectral_radius_map(const UlamOperator& op, const Observable& f,
                                                       const Torus& torus, const std::vector<double>& t_grid,
                                                       int n_power, std::uint64_t seed = 1, unsigned workers = 1) {
  return spectral_radius_map(op, observable_on_cells(op, f, torus), t_grid, n_power, seed, workers);
}

// ---------------------------------------------------------------------------
// Characteristic function against the leading eigendata.

struct CharFnEntry {
  long n = 0;
  cplx empirical;
  cplx predicted;
  double mismatch = 0.0;
  double log_mismatch = 0.0;
  bool above_floor = false;
};

struct CharFnReport {
  double t = 0.0;
  cplx lambda;
  cplx w;  // (l . h)(1 . r) / (l . r)
  double noise_floor = 0.0;  // 1 / sqrt(n_traj)
  std::vector<CharFnEntry> entries;
  // Fit of log mismatch against n over the leading run of points above
  // 3 * noise_floor.
  int fit_points = 0;
  double slope = std::numeric_limits<double>::quiet_NaN();
  double r2 = std::numeric_limits<double>::quiet_NaN();
  double decay_rate() const { return std::exp(slope); }
};

inline constexpr double kFloorFactor = 3.0;

inline CharFnReport char_fn_check(const UlamOperator& op, const Observable& f, const Torus& torus, double t,
                                  const std::vector<long>& n_list, const EnsembleRun& run, double tol = 1e-12,
                                  unsigned workers = 1) {
  if (run.f.support() != f.support() || run.f.offset() != f.offset() || run.f.name() != f.name())
    throw ConfigError("char_fn_check: ensemble was run with a different observable");
  const std::size_t n = op.cells();
  const auto f_cells = observable_on_cells(op, f, torus);
  const auto P = twist(op, f_cells, t);
  const auto h = stationary_density(op, 1e-13, 100000, {}, workers).mass;

  CharFnReport rep;
  rep.t = t;
  const auto right = detail::leading_eigen(P, detail::initial_block(n, 7), nullptr, tol, 20000, workers);
  rep.lambda = right.lambda;

  // Left eigenvector: the eigenpair of P^T closest to lambda.
  std::vector<cplx> xin(n), yout(n);
  auto apply_t = [&](const auto& x, detail::CVec& y) {
    for (std::size_t i = 0; i < n; ++i) xin[i] = x(static_cast<Eigen::Index>(i));
    P.apply_transpose(xin, yout);
    for (std::size_t i = 0; i < n; ++i) y(static_cast<Eigen::Index>(i)) = yout[i];
  };
  const auto left = detail::subspace_iteration(apply_t, detail::initial_block(n, 11), 1, tol, 20000);
  std::size_t pick = 0;
  for (std::size_t j = 1; j < left.values.size(); ++j)
    if (std::abs(left.values[j] - rep.lambda) < std::abs(left.values[pick] - rep.lambda)) pick = j;
  const detail::CVec l = left.vectors.col(static_cast<Eigen::Index>(pick));
  const detail::CVec& r = right.vector;
  cplx lh = 0.0, one_r = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lh += l(static_cast<Eigen::Index>(i)) * h[i];
    one_r += r(static_cast<Eigen::Index>(i));
  }
  const cplx lr = (l.transpose() * r)(0);
  rep.w = lh * one_r / lr;

  rep.noise_floor = 1.0 / std::sqrt(static_cast<double>(run.n_traj));
  for (long m : n_list) {
    const auto& s = run.samples_at(m);
    cplx acc = 0.0;
    for (double v : s) acc += std::polar(1.0, t * v);
    CharFnEntry e;
    e.n = m;
    e.empirical = acc / static_cast<double>(s.size());
    e.predicted = rep.w * std::pow(rep.lambda, static_cast<double>(m));
    e.mismatch = std::abs(e.empirical - e.predicted);
    e.log_mismatch = std::log(std::max(e.mismatch, std::numeric_limits<double>::min()));
    e.above_floor = e.mismatch > kFloorFactor * rep.noise_floor;
    rep.entries.push_back(e);
  }
  std::vector<double> xs, ys;
  for (const auto& e : rep.entries) {
    if (!e.above_floor) break;
    xs.push_back(static_cast<double>(e.n));
    ys.push_back(e.log_mismatch);
  }
  rep.fit_points = static_cast<int>(xs.size());
  if (xs.size() >= 2) {
    const auto fit = stats::linear_fit(xs, ys);
    rep.slope = fit.slope;
    rep.r2 = fit.r2;
  }
  return rep;
}

}  // namespace cml
