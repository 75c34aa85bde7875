#pragma once

// Config-driven experiments: schema validation, dispatch to the library,
// report/CSV/Matrix Market emission and a hashed run manifest.

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "cml/bvdiag.hpp"
#include "cml/ensemble.hpp"
#include "cml/error.hpp"
#include "cml/lattice.hpp"
#include "cml/observable.hpp"
#include "cml/parallel.hpp"
#include "cml/spectral.hpp"

namespace cml::experiment {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kDefaultOutput = "cml-lab-out";

enum ExitCode : int { kOk = 0, kFailure = 1, kValidation = 2, kNonConvergence = 3 };

inline const std::vector<std::string>& kinds() {
  static const std::vector<std::string> k{"simulate", "variance",     "clt",          "llt",     "spectrum",
                                          "lambda-curve", "radius-map", "check-coupling", "bv-suite"};
  return k;
}

// Allowed params and thresholds per kind.
struct KindSchema {
  std::set<std::string> params;
  std::set<std::string> thresholds;
  bool needs_observable = true;
};

inline const KindSchema& schema(const std::string& kind) {
  static const std::set<std::string> ulam{"k", "N", "samples_per_cell", "method"};
  auto with_ulam = [&](std::set<std::string> s) {
    s.insert(ulam.begin(), ulam.end());
    return s;
  };
  static const std::map<std::string, KindSchema> table{
      {"simulate", {{"n", "n_traj", "n_burn"}, {}}},
      {"variance",
       {with_ulam({"K", "n_avg", "n_burn", "n", "n_traj", "t_step", "n_list"}),
        {"rel_tol", "z", "expect_degenerate"}}},
      {"clt", {{"n", "n_traj", "n_burn", "sigma2", "K", "n_avg", "n_list"}, {"ks_max", "ks_decreasing"}}},
      {"llt", {{"n", "n_traj", "n_burn", "sigma2", "K", "n_avg", "intervals", "n_list"}, {"rel_tol"}}},
      {"spectrum", {with_ulam({"n_eigs", "tol"}), {"gap_min"}, false}},
      {"lambda-curve", {with_ulam({"t_grid", "t_max", "dt", "tol"}), {"lambda0_tol", "lambda_prime_max"}}},
      {"radius-map", {with_ulam({"t_grid", "t_max", "dt", "n_power"}), {"radius_max"}}},
      {"check-coupling", {{"n_samples"}, {}, false}},
      {"bv-suite", {{"n_instances", "M_max", "lasota_yorke_C"}, {"max_violations"}, false}},
  };
  const auto it = table.find(kind);
  if (it == table.end()) throw ConfigError("config: unknown experiment kind '" + kind + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// Parsing.

struct ObservableSpec {
  json raw;
  Observable f = observables::zero();
  bool center = false;
  long center_burn = kDefaultBurnIn;
  long center_steps = 1000000;
};

inline SiteCoord parse_site(const json& j, const LatticeConfig& cfg, const char* where) {
  auto s = j.get<SiteCoord>();
  if (static_cast<int>(s.size()) != cfg.d())
    throw ConfigError(std::string("observable: ") + where + " must have " + std::to_string(cfg.d()) + " coordinates");
  return s;
}

inline ObservableSpec observable_from_json(const json& j, const LatticeConfig& cfg) {
  detail::reject_unknown_keys(j, {"kind", "site", "sites", "value", "offset", "center", "center_steps", "center_burn"},
                              "observable");
  ObservableSpec spec;
  spec.raw = j;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "coordinate") {
    spec.f = observables::coordinate(parse_site(j.at("site"), cfg, "site"));
  } else if (kind == "cos_coordinate") {
    spec.f = observables::cos_coordinate(parse_site(j.at("site"), cfg, "site"));
  } else if (kind == "product") {
    const auto& s = j.at("sites");
    if (!s.is_array() || s.size() != 2) throw ConfigError("observable: product needs exactly two sites");
    spec.f = observables::product(parse_site(s[0], cfg, "sites[0]"), parse_site(s[1], cfg, "sites[1]"));
  } else if (kind == "constant") {
    spec.f = observables::constant(j.at("value").get<double>());
  } else if (kind == "zero") {
    spec.f = observables::zero();
  } else if (kind == "coboundary") {
    spec.f = observables::coboundary_of_coordinate(cfg, parse_site(j.at("site"), cfg, "site"));
  } else {
    throw ConfigError("observable: unknown kind '" + kind + "'");
  }
  // a known mean (e.g. 1/2 for a coordinate under a symmetric map) is
  // subtracted exactly; "center" then estimates whatever is left
  if (j.contains("offset")) spec.f = spec.f.with_offset(j.at("offset").get<double>());
  spec.center = j.value("center", false);
  spec.center_steps = j.value("center_steps", spec.center_steps);
  spec.center_burn = j.value("center_burn", spec.center_burn);
  if (spec.center_steps < 1 || spec.center_burn < 0) throw ConfigError("observable: bad centering lengths");
  return spec;
}

struct ExperimentConfig {
  json raw;
  std::string kind;
  LatticeConfig lattice;
  std::optional<ObservableSpec> observable;
  json params = json::object();
  json thresholds = json::object();
  std::uint64_t seed = 1;
  std::string output;
};

inline ExperimentConfig parse_config(const json& j) {
  detail::reject_unknown_keys(j, {"kind", "lattice", "observable", "params", "seed", "output", "thresholds"},
                              "config");
  if (!j.contains("kind")) throw ConfigError("config: missing 'kind'");
  if (!j.contains("lattice")) throw ConfigError("config: missing 'lattice'");
  const auto kind = j.at("kind").get<std::string>();
  const auto& sch = schema(kind);
  auto cfg = lattice_from_json(j.at("lattice"));
  ExperimentConfig ec{j, kind, std::move(cfg), std::nullopt};
  if (j.contains("observable")) {
    ec.observable = observable_from_json(j.at("observable"), ec.lattice);
  } else if (sch.needs_observable) {
    throw ConfigError("config: kind '" + kind + "' needs an 'observable'");
  }
  if (j.contains("params")) {
    ec.params = j.at("params");
    if (!ec.params.is_object()) throw ConfigError("config: 'params' must be an object");
    for (const auto& [key, _] : ec.params.items())
      if (!sch.params.count(key)) throw ConfigError("params: unknown key '" + key + "' for kind '" + kind + "'");
  }
  if (j.contains("thresholds")) {
    ec.thresholds = j.at("thresholds");
    if (!ec.thresholds.is_object()) throw ConfigError("config: 'thresholds' must be an object");
    for (const auto& [key, _] : ec.thresholds.items())
      if (!sch.thresholds.count(key))
        throw ConfigError("thresholds: unknown key '" + key + "' for kind '" + kind + "'");
  }
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("config: 'seed' must be a nonnegative integer");
    ec.seed = j.at("seed").get<std::uint64_t>();
  }
  ec.output = j.value("output", std::string());
  return ec;
}

// ---------------------------------------------------------------------------
// Output helpers.

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class OutputDir {
 public:
  explicit OutputDir(fs::path dir) : dir_(std::move(dir)) {}

  const fs::path& path() const { return dir_; }

  void write(const std::string& name, const std::string& content) {
    std::ofstream out(dir_ / name, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + (dir_ / name).string());
    out << content;
    if (!out) throw ConfigError("write failed for " + (dir_ / name).string());
    files_.push_back({{"path", name}, {"sha256", sha256_hex(content)}, {"bytes", content.size()}});
  }

  const json& files() const { return files_; }

 private:
  fs::path dir_;
  json files_ = json::array();
};

inline std::string samples_csv(std::span<const double> s) {
  std::string out = "index,S_n\n";
  out.reserve(s.size() * 26);
  for (std::size_t i = 0; i < s.size(); ++i) out += std::to_string(i) + "," + num(s[i]) + "\n";
  return out;
}

// Threshold checks land in report["checks"]; summary only reformats them.
class Checks {
 public:
  void add(const std::string& name, double value, const std::string& op, double threshold) {
    bool pass = false;
    if (op == "<=") pass = value <= threshold;
    else if (op == "<") pass = value < threshold;
    else if (op == ">=") pass = value >= threshold;
    else if (op == ">") pass = value > threshold;
    items_.push_back({{"name", name}, {"value", value}, {"op", op}, {"threshold", threshold}, {"pass", pass}});
  }
  void flag(const std::string& name, bool pass) {
    items_.push_back({{"name", name}, {"value", pass ? 1.0 : 0.0}, {"op", "=="}, {"threshold", 1.0}, {"pass", pass}});
  }
  const json& items() const { return items_; }

 private:
  json items_ = json::array();
};

inline json to_json(cplx z) { return json{{"re", z.real()}, {"im", z.imag()}}; }

// ---------------------------------------------------------------------------
// Shared pieces of the kinds.

template <class T>
T param(const ExperimentConfig& ec, const char* key, T fallback) {
  return ec.params.contains(key) ? ec.params.at(key).get<T>() : fallback;
}

template <class T>
T required(const ExperimentConfig& ec, const char* key) {
  if (!ec.params.contains(key)) throw ConfigError(std::string("params: '") + key + "' is required for kind '" + ec.kind + "'");
  return ec.params.at(key).get<T>();
}

inline long positive(long v, const char* key) {
  if (v < 1) throw ConfigError(std::string("params: '") + key + "' must be positive");
  return v;
}

// Observable with the time-average centring applied when requested.
inline Observable dynamic_observable(const ExperimentConfig& ec) {
  const auto& spec = *ec.observable;
  if (!spec.center) return spec.f;
  return center(spec.f, ec.lattice, spec.center_burn, spec.center_steps, ec.seed);
}

inline UlamOperator ulam_from_params(const ExperimentConfig& ec, unsigned workers, json& rep) {
  const int k = param(ec, "k", 1);
  const int N = param(ec, "N", 81);
  const int samples = param(ec, "samples_per_cell", 1000);
  const auto method = param<std::string>(ec, "method", "auto");
  UlamMethod m;
  if (method == "exact") m = UlamMethod::exact;
  else if (method == "monte_carlo") m = UlamMethod::monte_carlo;
  else if (method == "auto") m = ec.lattice.eps() == 0.0 && ec.lattice.map().piecewise_linear() ? UlamMethod::exact : UlamMethod::monte_carlo;
  else throw ConfigError("params: method must be exact, monte_carlo or auto");

  auto build = [&](UlamMethod mm) { return build_ulam(ec.lattice, k, N, samples, ec.seed, mm, workers); };
  std::optional<UlamOperator> op;
  if (method == "auto" && m == UlamMethod::exact) {
    try {
      op = build(m);
    } catch (const AlignmentError&) {
      op = build(UlamMethod::monte_carlo);
    }
  } else {
    op = build(m);
  }
  rep["ulam"] = {{"k", op->k()},
                 {"N", op->N()},
                 {"cells", op->cells()},
                 {"nonzeros", op->matrix().nonzeros()},
                 {"method", to_string(op->method())},
                 {"samples_per_cell", op->samples_per_cell()}};
  return std::move(*op);
}

// Observable for spectral kinds: centred under the Ulam stationary mass when
// requested, which is what makes lambda'(0) vanish for the discrete operator.
inline Observable spectral_observable(const ExperimentConfig& ec, const UlamOperator& op, unsigned workers) {
  const auto& spec = *ec.observable;
  if (!spec.center) return spec.f;
  return center_on_ulam(op, spec.f, ec.lattice.torus(), workers);
}

inline std::vector<double> t_grid_from_params(const ExperimentConfig& ec, bool symmetric) {
  if (ec.params.contains("t_grid")) {
    auto g = ec.params.at("t_grid").get<std::vector<double>>();
    if (g.empty()) throw ConfigError("params: t_grid is empty");
    return g;
  }
  const double t_max = param(ec, "t_max", 2.0);
  const double dt = param(ec, "dt", kDefaultDerivativeStep);
  if (!(dt > 0.0) || !(t_max >= 0.0)) throw ConfigError("params: need dt > 0 and t_max >= 0");
  const long m = std::lround(t_max / dt);
  std::vector<double> g;
  for (long i = symmetric ? -m : 0; i <= m; ++i) g.push_back(static_cast<double>(i) * dt);
  return g;
}

// sigma^2 from the config or, failing that, from Green-Kubo.
inline double sigma2_for(const ExperimentConfig& ec, const Observable& f, json& rep) {
  if (ec.params.contains("sigma2")) {
    const double s2 = ec.params.at("sigma2").get<double>();
    rep["sigma2"] = {{"value", s2}, {"source", "config"}};
    return s2;
  }
  const int K = param(ec, "K", kDefaultGreenKuboLag);
  const long n_avg = param(ec, "n_avg", 1000000L);
  const auto gk = green_kubo(ec.lattice, f, K, n_avg, param(ec, "n_burn", kDefaultBurnIn), ec.seed);
  rep["sigma2"] = {{"value", gk.sigma2}, {"se", gk.sigma2_se}, {"source", "green_kubo"}, {"K", K}, {"n_avg", n_avg}};
  return gk.sigma2;
}

// Ensemble with the main horizon plus an optional ladder from params.n_list.
inline EnsembleRun ensemble_from_params(const ExperimentConfig& ec, const Observable& f, unsigned workers) {
  const long n = positive(required<long>(ec, "n"), "n");
  const long n_traj = positive(required<long>(ec, "n_traj"), "n_traj");
  const long n_burn = param(ec, "n_burn", kDefaultBurnIn);
  auto horizons = param(ec, "n_list", std::vector<long>{});
  for (long h : horizons)
    if (h < 1 || h > n) throw ConfigError("params: n_list entries must lie in [1, n]");
  horizons.push_back(n);
  return run_ensemble(ec.lattice, f, static_cast<std::size_t>(n_traj), horizons, n_burn, ec.seed, workers);
}

// ---------------------------------------------------------------------------
// Kinds.

inline void run_simulate(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks&) {
  const auto f = dynamic_observable(ec);
  rep["observable_offset"] = f.offset();
  const auto run = ensemble_from_params(ec, f, workers);
  const auto s = run.samples();
  const auto ev = ensemble_variance(run, run.n());
  rep["n"] = run.n();
  rep["n_traj"] = run.n_traj;
  rep["n_burn"] = run.n_burn;
  rep["mean"] = stats::mean(s);
  rep["var_over_n"] = ev.value;
  rep["var_over_n_se"] = ev.standard_error;
  out.write("samples.csv", samples_csv(s));
}

inline void run_variance(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks& checks) {
  const auto f = dynamic_observable(ec);
  rep["observable_offset"] = f.offset();
  const double z = ec.thresholds.value("z", 3.0);

  struct Estimate {
    std::string name;
    double value, se;
  };
  std::vector<Estimate> est;

  const int K = param(ec, "K", kDefaultGreenKuboLag);
  const long n_avg = positive(param(ec, "n_avg", 1000000L), "n_avg");
  const long n_burn = param(ec, "n_burn", kDefaultBurnIn);
  const auto gk = green_kubo(ec.lattice, f, K, n_avg, n_burn, ec.seed);
  rep["green_kubo"] = {{"sigma2", gk.sigma2},       {"sigma2_se", gk.sigma2_se},
                       {"autocov", gk.autocov},     {"autocov_se", gk.autocov_se},
                       {"K", gk.K},                 {"n_avg", gk.n_avg},
                       {"decay_ratio", gk.decay_ratio}, {"truncation_warning", gk.truncation_warning}};
  std::string csv = "k,C_k,se\n";
  for (std::size_t k = 0; k < gk.autocov.size(); ++k)
    csv += std::to_string(k) + "," + num(gk.autocov[k]) + "," + num(gk.autocov_se[k]) + "\n";
  out.write("autocov.csv", csv);
  est.push_back({"green_kubo", gk.sigma2, gk.sigma2_se});

  if (ec.params.contains("n") || ec.params.contains("n_traj")) {
    const auto run = ensemble_from_params(ec, f, workers);
    const auto ev = ensemble_variance(run, run.n());
    rep["ensemble"] = {{"n", run.n()}, {"n_traj", run.n_traj}, {"var_over_n", ev.value}, {"se", ev.standard_error}};
    out.write("samples.csv", samples_csv(run.samples()));
    est.push_back({"ensemble", ev.value, ev.standard_error});
    if (run.horizons.size() >= 2) {
      const auto dg = degeneracy_scan(run);
      rep["degeneracy"] = {{"n_list", dg.n_list}, {"var_over_n", dg.var_over_n}, {"var_over_n_se", dg.var_over_n_se},
                           {"slope", dg.slope}, {"all_zero", dg.all_zero}, {"degenerate", dg.degenerate}};
      std::string dc = "n,var_over_n,se\n";
      for (std::size_t i = 0; i < dg.n_list.size(); ++i)
        dc += std::to_string(dg.n_list[i]) + "," + num(dg.var_over_n[i]) + "," + num(dg.var_over_n_se[i]) + "\n";
      out.write("degeneracy.csv", dc);
    }
  }

  if (ec.params.contains("N") || ec.params.contains("k")) {
    const auto op = ulam_from_params(ec, workers, rep);
    const double h = param(ec, "t_step", kDefaultDerivativeStep);
    if (!(h > 0.0)) throw ConfigError("params: t_step must be positive");
    const auto curve = lambda_curve(op, ec.observable->f, ec.lattice.torus(), {0.0, h}, 1e-12, workers);
    rep["spectral"] = {{"h", curve.h},
                       {"lambda0", to_json(curve.lambda[0])},
                       {"lambda_prime", to_json(curve.lambda_prime)},
                       {"lambda_second", to_json(curve.lambda_second)},
                       {"sigma2", curve.sigma2()}};
    est.push_back({"spectral", curve.sigma2(), 0.0});
  }

  json tri = json::array();
  const double rel = ec.thresholds.value("rel_tol", 0.05);
  for (std::size_t a = 0; a < est.size(); ++a) {
    for (std::size_t b = a + 1; b < est.size(); ++b) {
      const double diff = std::abs(est[a].value - est[b].value);
      const double tol = rel * std::max(std::abs(est[a].value), std::abs(est[b].value)) +
                         z * std::hypot(est[a].se, est[b].se);
      tri.push_back({{"a", est[a].name}, {"b", est[b].name}, {"diff", diff}, {"tol", tol}});
      if (ec.thresholds.contains("rel_tol")) checks.add(est[a].name + "~" + est[b].name, diff, "<=", tol);
    }
  }
  rep["pairs"] = tri;
  rep["estimates"] = json::array();
  for (const auto& e : est) rep["estimates"].push_back({{"name", e.name}, {"sigma2", e.value}, {"se", e.se}});

  if (ec.thresholds.contains("expect_degenerate")) {
    const bool want = ec.thresholds.at("expect_degenerate").get<bool>();
    const bool zero_gk = std::abs(gk.sigma2) <= z * gk.sigma2_se + 1e-12;
    checks.flag("green_kubo_zero", zero_gk == want);
    if (rep.contains("degeneracy")) checks.flag("degeneracy_flag", rep["degeneracy"]["degenerate"].get<bool>() == want);
  }
}

inline void run_clt(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks& checks) {
  const auto f = dynamic_observable(ec);
  rep["observable_offset"] = f.offset();
  const double s2 = sigma2_for(ec, f, rep);
  const auto run = ensemble_from_params(ec, f, workers);
  const auto c = clt_test(run, s2);
  rep["clt"] = {{"n", c.n},
                {"n_traj", c.n_traj},
                {"ks_distance", c.ks_distance},
                {"ks_critical_95", c.ks_critical_95},
                {"skewness", c.skewness},
                {"excess_kurtosis", c.excess_kurtosis},
                {"normalized_mean", c.normalized_mean},
                {"normalized_variance", c.normalized_variance}};
  out.write("samples.csv", samples_csv(run.samples()));

  std::string csv = "n,ks_distance,ks_critical_95\n";
  json ladder = json::array();
  std::vector<double> ks;
  for (long h : run.horizons) {
    const auto r = clt_test(run.samples_at(h), h, s2);
    ks.push_back(r.ks_distance);
    ladder.push_back({{"n", h}, {"ks_distance", r.ks_distance}});
    csv += std::to_string(h) + "," + num(r.ks_distance) + "," + num(r.ks_critical_95) + "\n";
  }
  rep["ladder"] = ladder;
  out.write("ks.csv", csv);

  if (ec.thresholds.contains("ks_max")) checks.add("ks_distance", c.ks_distance, "<=", ec.thresholds.at("ks_max").get<double>());
  if (ec.thresholds.value("ks_decreasing", false)) {
    // Each step must shrink the distance until it reaches the sampling floor.
    bool ok = true;
    for (std::size_t i = 0; i + 1 < ks.size() && ks[i] > c.ks_critical_95; ++i) ok = ok && ks[i + 1] < ks[i];
    checks.flag("ks_decreasing", ok);
  }
}

inline void run_llt(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks& checks) {
  const auto f = dynamic_observable(ec);
  rep["observable_offset"] = f.offset();
  const double s2 = sigma2_for(ec, f, rep);
  if (!(s2 > 0.0)) throw DegenerateVarianceError("llt: sigma^2 must be positive");
  std::vector<Interval> intervals;
  const auto raw = param(ec, "intervals", std::vector<std::vector<double>>{{-0.5, 0.5}, {0.3, 0.8}});
  for (const auto& iv : raw) {
    if (iv.size() != 2) throw ConfigError("params: each interval is [a, b]");
    intervals.push_back({iv[0], iv[1]});
  }
  const auto run = ensemble_from_params(ec, f, workers);
  out.write("samples.csv", samples_csv(run.samples()));

  std::string csv = "n,a,b,length,count,expected_count,rho,rho_lo,rho_hi,rho_gaussian\n";
  json ladder = json::array();
  LltReport main;
  for (long h : run.horizons) {
    const auto r = llt_test(run.samples_at(h), h, std::sqrt(s2), intervals);
    for (const auto& e : r.entries) {
      csv += std::to_string(h) + "," + num(e.interval.a) + "," + num(e.interval.b) + "," + num(e.interval.length()) +
             "," + std::to_string(e.count) + "," + num(e.expected_count) + "," + num(e.rho) + "," + num(e.rho_lo) +
             "," + num(e.rho_hi) + "," + num(e.rho_gaussian) + "\n";
      ladder.push_back({{"n", h}, {"a", e.interval.a}, {"b", e.interval.b}, {"rho", e.rho},
                        {"deviation", std::abs(e.rho - e.interval.length())}});
    }
    if (h == run.n()) main = r;
  }
  out.write("llt.csv", csv);
  rep["ladder"] = ladder;
  json entries = json::array();
  for (const auto& e : main.entries) {
    entries.push_back({{"a", e.interval.a},
                       {"b", e.interval.b},
                       {"length", e.interval.length()},
                       {"count", e.count},
                       {"expected_count", e.expected_count},
                       {"rho", e.rho},
                       {"rho_lo", e.rho_lo},
                       {"rho_hi", e.rho_hi},
                       {"rho_gaussian", e.rho_gaussian},
                       {"low_count_warning", e.low_count_warning}});
    if (ec.thresholds.contains("rel_tol") && e.interval.length() > 0.0) {
      std::ostringstream name;
      name << "rho[" << e.interval.a << "," << e.interval.b << "]";
      checks.add(name.str(), std::abs(e.rho / e.interval.length() - 1.0), "<=", ec.thresholds.at("rel_tol").get<double>());
    }
  }
  rep["llt"] = {{"n", main.n}, {"n_traj", main.n_traj}, {"sigma", main.sigma}, {"entries", entries}};
}

inline void run_spectrum(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks& checks) {
  const auto op = ulam_from_params(ec, workers, rep);
  const int n_eigs = param(ec, "n_eigs", 4);
  const double tol = param(ec, "tol", 1e-10);
  std::ostringstream mtx;
  op.write_matrix_market(mtx);
  out.write("operator.mtx", mtx.str());

  const auto h = stationary_density(op, 1e-12, 100000, {}, workers);
  std::string csv = "cell,mass,density\n";
  for (std::size_t c = 0; c < h.mass.size(); ++c)
    csv += std::to_string(c) + "," + num(h.mass[c]) + "," + num(h.density[c]) + "\n";
  out.write("stationary.csv", csv);

  const auto g = spectral_gap(op, n_eigs, tol, 20000, ec.seed, workers);
  std::string ev = "index,re,im,abs\n";
  json evs = json::array();
  for (std::size_t i = 0; i < g.eigenvalues.size(); ++i) {
    ev += std::to_string(i) + "," + num(g.eigenvalues[i].real()) + "," + num(g.eigenvalues[i].imag()) + "," +
          num(std::abs(g.eigenvalues[i])) + "\n";
    evs.push_back(to_json(g.eigenvalues[i]));
  }
  out.write("eigenvalues.csv", ev);
  double min_col = 1e300, max_col = -1e300;
  for (double s : op.matrix().column_sums()) {
    min_col = std::min(min_col, s);
    max_col = std::max(max_col, s);
  }
  rep["spectrum"] = {{"gap", g.gap},
                     {"lambda2_modulus", g.lambda2_modulus},
                     {"eigenvalues", evs},
                     {"stationary_residual", h.residual},
                     {"stationary_iterations", h.iterations},
                     {"column_sum_min", min_col},
                     {"column_sum_max", max_col}};
  if (ec.thresholds.contains("gap_min")) checks.add("spectral_gap", g.gap, ">=", ec.thresholds.at("gap_min").get<double>());
}

inline void run_lambda_curve(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks& checks) {
  const auto op = ulam_from_params(ec, workers, rep);
  const auto f = spectral_observable(ec, op, workers);
  rep["observable_offset"] = f.offset();
  const auto curve = lambda_curve(op, f, ec.lattice.torus(), t_grid_from_params(ec, true), param(ec, "tol", 1e-12), workers);
  std::ostringstream csv;
  curve.write_csv(csv);
  out.write("curve.csv", csv.str());
  const auto i0 = static_cast<std::size_t>(std::find(curve.t.begin(), curve.t.end(), 0.0) - curve.t.begin());
  double min_overlap = 1.0;
  for (double o : curve.overlap) min_overlap = std::min(min_overlap, o);
  rep["lambda_curve"] = {{"points", curve.t.size()},
                         {"h", curve.h},
                         {"lambda0", to_json(curve.lambda[i0])},
                         {"lambda_prime", to_json(curve.lambda_prime)},
                         {"lambda_second", to_json(curve.lambda_second)},
                         {"sigma2", curve.sigma2()},
                         {"min_overlap", min_overlap}};
  if (ec.thresholds.contains("lambda0_tol"))
    checks.add("lambda0", std::abs(curve.lambda[i0] - 1.0), "<=", ec.thresholds.at("lambda0_tol").get<double>());
  if (ec.thresholds.contains("lambda_prime_max"))
    checks.add("lambda_prime", std::abs(curve.lambda_prime), "<=", ec.thresholds.at("lambda_prime_max").get<double>());
}

inline void run_radius_map(const ExperimentConfig& ec, unsigned workers, OutputDir& out, json& rep, Checks& checks) {
  const auto op = ulam_from_params(ec, workers, rep);
  const auto f = spectral_observable(ec, op, workers);
  const int n_power = param(ec, "n_power", 200);
  const auto map = spectral_radius_map(op, f, ec.lattice.torus(), t_grid_from_params(ec, false), n_power, ec.seed, workers);
  std::string csv = "t,radius\n";
  double rmin = 1e300, rmax = -1e300;
  json pts = json::array();
  for (const auto& r : map) {
    csv += num(r.t) + "," + num(r.radius) + "\n";
    pts.push_back({{"t", r.t}, {"radius", r.radius}});
    if (r.t != 0.0) {
      rmin = std::min(rmin, r.radius);
      rmax = std::max(rmax, r.radius);
    }
  }
  out.write("radius.csv", csv);
  rep["radius_map"] = {{"n_power", n_power}, {"points", pts}};
  if (rmax >= rmin) {
    rep["radius_map"]["min_radius"] = rmin;
    rep["radius_map"]["max_radius"] = rmax;
    if (ec.thresholds.contains("radius_max"))
      checks.add("max_radius_t_nonzero", rmax, "<", ec.thresholds.at("radius_max").get<double>());
  }
}

inline void run_check_coupling(const ExperimentConfig& ec, unsigned, OutputDir& out, json& rep, Checks& checks) {
  const int n_samples = param(ec, "n_samples", 10);
  const auto b = verify_coupling_bounds(ec.lattice, n_samples, ec.seed);
  rep["bounds"] = {{"bound", b.bound},
                   {"sup_increment", b.sup_increment},
                   {"sup_jacobian", b.sup_jacobian},
                   {"sup_second", b.sup_second},
                   {"max_nonlocal_derivative", b.max_nonlocal_derivative},
                   {"increment_ok", b.increment_ok},
                   {"jacobian_ok", b.jacobian_ok},
                   {"second_ok", b.second_ok},
                   {"locality_ok", b.locality_ok}};
  if (b.locality_violation) rep["bounds"]["locality_violation"] = {b.locality_violation->first, b.locality_violation->second};
  checks.add("sup_increment", b.sup_increment, "<=", b.bound);
  checks.add("sup_jacobian", b.sup_jacobian, "<=", b.bound);
  checks.add("sup_second", b.sup_second, "<=", b.bound);
  checks.add("nonlocal_derivative", b.max_nonlocal_derivative, "<=", 1e-8);
  out.write("bounds.csv", "quantity,value,bound\nsup_increment," + num(b.sup_increment) + "," + num(b.bound) +
                              "\nsup_jacobian," + num(b.sup_jacobian) + "," + num(b.bound) + "\nsup_second," +
                              num(b.sup_second) + "," + num(b.bound) + "\nnonlocal_derivative," +
                              num(b.max_nonlocal_derivative) + "," + num(1e-8) + "\n");
}

inline void run_bv(const ExperimentConfig& ec, unsigned, OutputDir& out, json& rep, Checks& checks) {
  const long n = param(ec, "n_instances", 10000L);
  const long M_max = param(ec, "M_max", 200L);
  if (M_max < 1) throw ConfigError("params: M_max must be positive");
  const double C = param(ec, "lasota_yorke_C", 2.0);
  const auto r = run_bv_suite(ec.lattice.map(), n, static_cast<std::size_t>(M_max), C, ec.seed);
  std::string csv = "check,checked,violations,worst_slack\n";
  json items = json::array();
  for (const auto& c : r.checks) {
    csv += c.name + "," + std::to_string(c.checked) + "," + std::to_string(c.violations) + "," + num(c.worst_slack) + "\n";
    items.push_back({{"name", c.name}, {"checked", c.checked}, {"violations", c.violations}, {"worst_slack", c.worst_slack}});
  }
  out.write("bv.csv", csv);
  rep["bv"] = {{"instances", r.instances},
               {"ly_coefficient", r.ly_coefficient},
               {"ly_constant", r.ly_constant},
               {"checks", items},
               {"violations", r.violations()}};
  checks.add("violations", static_cast<double>(r.violations()), "<=", ec.thresholds.value("max_violations", 0.0));
}

// ---------------------------------------------------------------------------
// Entry points.

struct RunOutcome {
  int exit_code = kOk;
  fs::path out_dir;
  std::vector<std::string> errors;
  json report;
};

inline int exit_code_for(std::exception_ptr e, std::string& message) {
  try {
    std::rethrow_exception(e);
  } catch (const ConvergenceError& x) {
    message = x.what();
    return kNonConvergence;
  } catch (const ConfigError& x) {
    message = x.what();
    return kValidation;
  } catch (const DomainError& x) {
    message = x.what();
    return kValidation;
  } catch (const AlignmentError& x) {
    message = x.what();
    return kValidation;
  } catch (const SupportError& x) {
    message = x.what();
    return kValidation;
  } catch (const DegenerateVarianceError& x) {
    message = x.what();
    return kValidation;
  } catch (const json::exception& x) {
    message = std::string("config: ") + x.what();
    return kValidation;
  } catch (const std::exception& x) {
    message = x.what();
    return kFailure;
  }
}

inline std::string compiler_version() {
#if defined(__clang__)
  return std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  return std::string("gcc ") + __VERSION__;
#else
  return "unknown";
#endif
}

// config_text is hashed as given; out_override beats the config's "output".
inline RunOutcome run_config_text(const std::string& config_text, const std::optional<fs::path>& out_override,
                                  unsigned workers) {
  const auto t0 = std::chrono::steady_clock::now();
  if (workers == 0) workers = default_workers();
  RunOutcome res;
  json manifest{{"version", kVersion},
                {"versions",
                 {{"cml_lab", kVersion},
                  {"compiler", compiler_version()},
                  {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION)},
                  {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                        std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                        std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
                {"config_sha256", sha256_hex(config_text)},
                {"workers", workers}};

  std::optional<ExperimentConfig> ec;
  json raw;
  std::string msg;
  try {
    raw = json::parse(config_text);
    manifest["config"] = raw;
    ec = parse_config(raw);
    manifest["kind"] = ec->kind;
    manifest["seeds"] = {{"master_seed", ec->seed}};
  } catch (...) {
    res.exit_code = exit_code_for(std::current_exception(), msg);
    res.errors.push_back(msg);
  }

  fs::path dir = out_override ? *out_override
                 : ec && !ec->output.empty() ? fs::path(ec->output)
                 : raw.is_object() && raw.contains("output") && raw["output"].is_string()
                     ? fs::path(raw["output"].get<std::string>())
                     : fs::path(kDefaultOutput);
  res.out_dir = dir;
  std::error_code mk;
  fs::create_directories(dir, mk);
  if (mk) {
    res.errors.push_back("cannot create output directory " + dir.string() + ": " + mk.message());
    if (res.exit_code == kOk) res.exit_code = kValidation;
    return res;
  }
  // stale artifacts of an earlier run in the same directory would survive
  // next to the new manifest, so drop the ones we own
  for (const char* f : {"report.json", "manifest.json"}) fs::remove(dir / f, mk);

  OutputDir out(dir);
  json rep{{"kind", ec ? ec->kind : std::string()}};
  Checks checks;
  if (ec) {
    try {
      rep["lattice"] = to_json(ec->lattice);
      rep["seed"] = ec->seed;
      if (ec->observable) rep["observable"] = ec->observable->raw;
      const auto& k = ec->kind;
      if (k == "simulate") run_simulate(*ec, workers, out, rep, checks);
      else if (k == "variance") run_variance(*ec, workers, out, rep, checks);
      else if (k == "clt") run_clt(*ec, workers, out, rep, checks);
      else if (k == "llt") run_llt(*ec, workers, out, rep, checks);
      else if (k == "spectrum") run_spectrum(*ec, workers, out, rep, checks);
      else if (k == "lambda-curve") run_lambda_curve(*ec, workers, out, rep, checks);
      else if (k == "radius-map") run_radius_map(*ec, workers, out, rep, checks);
      else if (k == "check-coupling") run_check_coupling(*ec, workers, out, rep, checks);
      else run_bv(*ec, workers, out, rep, checks);
    } catch (...) {
      res.exit_code = exit_code_for(std::current_exception(), msg);
      res.errors.push_back(msg);
    }
  }
  rep["checks"] = checks.items();
  rep["exit_code"] = res.exit_code;
  rep["errors"] = res.errors;
  try {
    out.write("report.json", rep.dump(2) + "\n");
  } catch (const std::exception& e) {
    res.errors.push_back(e.what());
  }
  res.report = rep;

  manifest["exit_code"] = res.exit_code;
  manifest["errors"] = res.errors;
  manifest["files"] = out.files();
  manifest["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
  return res;
}

inline RunOutcome run_config_file(const fs::path& config_path, const std::optional<fs::path>& out_override,
                                  unsigned workers) {
  std::string text;
  try {
    text = read_file(config_path);
  } catch (const ConfigError& e) {
    // Still leave a manifest behind so the failure is on record.
    auto res = run_config_text("", out_override, workers);
    res.errors.insert(res.errors.begin(), e.what());
    return res;
  }
  return run_config_text(text, out_override, workers);
}

// ---------------------------------------------------------------------------
// Summary.

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

inline std::string report_summary(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("summary: no manifest.json in " + dir.string());
  json man, rep;
  try {
    man = json::parse(read_file(dir / "manifest.json"));
    if (fs::exists(dir / "report.json")) rep = json::parse(read_file(dir / "report.json"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("summary: unreadable manifest or report: ") + e.what());
  }
  std::ostringstream os;
  const auto kind = man.value("kind", std::string("?"));
  os << "run     " << dir.string() << "\n"
     << "kind    " << kind << "\n"
     << "exit    " << man.value("exit_code", -1) << "\n"
     << "wall    " << fmt(man.value("wall_time_s", 0.0), 4) << " s, workers " << man.value("workers", 0) << "\n"
     << "files   " << man.value("files", json::array()).size() << "\n";
  for (const auto& e : man.value("errors", json::array())) os << "error   " << e.get<std::string>() << "\n";

  if (rep.contains("estimates")) {
    os << "sigma^2 estimates\n";
    for (const auto& e : rep["estimates"]) {
      os << "  " << std::left << std::setw(12) << e["name"].get<std::string>() << std::right << std::setw(14)
         << fmt(e["sigma2"].get<double>());
      if (e["se"].get<double>() > 0.0) os << "  +- " << fmt(e["se"].get<double>(), 3);
      os << "\n";
    }
  }
  if (rep.contains("degeneracy")) os << "var/n log-log slope " << fmt(rep["degeneracy"]["slope"].get<double>(), 4) << "\n";
  if (rep.contains("sigma2")) os << "sigma^2 " << fmt(rep["sigma2"]["value"].get<double>()) << " (" << rep["sigma2"]["source"].get<std::string>() << ")\n";
  if (rep.contains("clt")) {
    const auto& c = rep["clt"];
    os << "KS distance " << fmt(c["ks_distance"].get<double>(), 4) << " (95% critical " << fmt(c["ks_critical_95"].get<double>(), 4)
       << ") at n = " << c["n"] << ", skew " << fmt(c["skewness"].get<double>(), 3) << ", excess kurtosis "
       << fmt(c["excess_kurtosis"].get<double>(), 3) << "\n";
  }
  if (rep.contains("llt")) {
    os << "interval            rho_I        |I|   95% interval\n";
    for (const auto& e : rep["llt"]["entries"]) {
      std::ostringstream iv;
      iv << "[" << e["a"].get<double>() << ", " << e["b"].get<double>() << "]";
      os << "  " << std::left << std::setw(16) << iv.str() << std::right << std::setw(10) << fmt(e["rho"].get<double>(), 4)
         << std::setw(10) << fmt(e["length"].get<double>(), 4) << "   [" << fmt(e["rho_lo"].get<double>(), 4) << ", "
         << fmt(e["rho_hi"].get<double>(), 4) << "]" << (e["low_count_warning"].get<bool>() ? "  low count" : "") << "\n";
    }
  }
  if (rep.contains("spectrum"))
    os << "spectral gap " << fmt(rep["spectrum"]["gap"].get<double>()) << ", |lambda_2| "
       << fmt(rep["spectrum"]["lambda2_modulus"].get<double>()) << "\n";
  if (rep.contains("lambda_curve")) {
    const auto& c = rep["lambda_curve"];
    os << "lambda(0) " << fmt(c["lambda0"]["re"].get<double>(), 15) << ", lambda'(0) " << fmt(c["lambda_prime"]["re"].get<double>(), 4)
       << (c["lambda_prime"]["im"].get<double>() < 0 ? " - " : " + ") << fmt(std::abs(c["lambda_prime"]["im"].get<double>()), 4)
       << "i, sigma^2 " << fmt(c["sigma2"].get<double>()) << "\n";
  }
  if (rep.contains("radius_map") && rep["radius_map"].contains("min_radius"))
    os << "radius over t != 0: min " << fmt(rep["radius_map"]["min_radius"].get<double>()) << ", max "
       << fmt(rep["radius_map"]["max_radius"].get<double>()) << "\n";
  if (rep.contains("bounds")) {
    const auto& b = rep["bounds"];
    os << "coupling sup|A| " << fmt(b["sup_increment"].get<double>(), 4) << ", sup|DA| " << fmt(b["sup_jacobian"].get<double>(), 4)
       << ", sup|D2A| " << fmt(b["sup_second"].get<double>(), 4) << " (bound " << fmt(b["bound"].get<double>(), 4)
       << "), locality " << (b["locality_ok"].get<bool>() ? "ok" : "violated") << "\n";
  }
  if (rep.contains("bv")) {
    for (const auto& c : rep["bv"]["checks"])
      os << "  " << std::left << std::setw(20) << c["name"].get<std::string>() << std::right << std::setw(8)
         << c["checked"].get<long>() << " checked, " << c["violations"].get<long>() << " violations\n";
  }
  const auto checks = rep.value("checks", json::array());
  if (!checks.empty()) {
    int failed = 0;
    for (const auto& c : checks) {
      const bool pass = c["pass"].get<bool>();
      failed += pass ? 0 : 1;
      os << (pass ? "PASS  " : "FAIL  ") << c["name"].get<std::string>() << "  " << fmt(c["value"].get<double>())
         << " " << c["op"].get<std::string>() << " " << fmt(c["threshold"].get<double>()) << "\n";
    }
    os << (failed ? std::to_string(failed) + " check(s) failed" : std::string("all checks passed")) << "\n";
  }
  return os.str();
}

}  // namespace cml::experiment
