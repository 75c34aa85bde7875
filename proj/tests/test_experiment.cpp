#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cml/experiment.hpp"

using namespace cml;
namespace ex = cml::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("cml_experiment_test_" + name);
  fs::remove_all(p);
  return p;
}

ex::RunOutcome run(const std::string& config, const fs::path& out, unsigned workers = 1) {
  return ex::run_config_text(config, out, workers);
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(ex::read_file(dir / "manifest.json")); }

const char* kSimulate = R"({"kind":"simulate","lattice":{"L":8,"eps":0.02},
  "observable":{"kind":"coordinate","site":[0],"center":true,"center_steps":20000},
  "params":{"n":64,"n_traj":300,"n_burn":50},"seed":12})";

}  // namespace

TEST(ExperimentConfig, SchemaRejectsUnknownKeys) {
  const auto base = nlohmann::json::parse(kSimulate);
  EXPECT_NO_THROW(ex::parse_config(base));
  auto j = base;
  j["bogus"] = 1;
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j["params"]["K"] = 3;  // Green-Kubo lag is not a simulate parameter
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j["thresholds"] = {{"ks_max", 0.1}};
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j["observable"]["colour"] = "red";
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j["kind"] = "sing";
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j.erase("observable");
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j["observable"]["site"] = {0, 0};  // two coordinates on a ring
  EXPECT_THROW(ex::parse_config(j), ConfigError);
  j = base;
  j["seed"] = -3;
  EXPECT_THROW(ex::parse_config(j), ConfigError);
}

TEST(Run, EpsAboveMaxIsValidationFailure) {
  const auto out = scratch("eps");
  const auto res = run(R"({"kind":"simulate","lattice":{"L":16,"eps":0.2},
    "observable":{"kind":"coordinate","site":[0]},"params":{"n":8,"n_traj":4}})", out);
  EXPECT_EQ(res.exit_code, 2);
  ASSERT_EQ(res.errors.size(), 1u);
  EXPECT_NE(res.errors[0].find("eps_max"), std::string::npos);
  const auto m = manifest(out);
  EXPECT_EQ(m["exit_code"], 2);
  EXPECT_NE(m["errors"][0].get<std::string>().find("eps_max"), std::string::npos);
}

TEST(Run, MalformedAndMissingConfigs) {
  auto out = scratch("malformed");
  EXPECT_EQ(run("{not json", out).exit_code, 2);
  EXPECT_EQ(manifest(out)["exit_code"], 2);
  out = scratch("missing");
  const auto res = ex::run_config_file(out / "nope.json", out, 1);
  EXPECT_EQ(res.exit_code, 2);
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  // a typed parameter of the wrong type
  out = scratch("typed");
  EXPECT_EQ(run(R"({"kind":"simulate","lattice":{"L":8},"observable":{"kind":"zero"},
    "params":{"n":"many","n_traj":4}})", out).exit_code, 2);
}

TEST(Run, CheckCouplingOnDiffusivePasses) {
  const auto out = scratch("coupling");
  const auto res = run(R"({"kind":"check-coupling","lattice":{"L":9,"eps":0.05},"params":{"n_samples":4}})", out);
  EXPECT_EQ(res.exit_code, 0);
  ASSERT_EQ(res.report["checks"].size(), 4u);
  for (const auto& c : res.report["checks"]) EXPECT_TRUE(c["pass"].get<bool>()) << c["name"];
  EXPECT_TRUE(res.report["bounds"]["locality_ok"].get<bool>());
}

TEST(Run, ManifestHashesEveryFile) {
  const auto out = scratch("manifest");
  ASSERT_EQ(run(kSimulate, out).exit_code, 0);
  const auto m = manifest(out);
  EXPECT_EQ(m["config_sha256"], ex::sha256_hex(kSimulate));
  EXPECT_EQ(m["seeds"]["master_seed"], 12);
  EXPECT_TRUE(m.contains("wall_time_s"));
  EXPECT_TRUE(m["versions"].contains("eigen"));
  std::set<std::string> listed;
  for (const auto& f : m["files"]) {
    listed.insert(f["path"].get<std::string>());
    const auto bytes = ex::read_file(out / f["path"].get<std::string>());
    EXPECT_EQ(f["sha256"], ex::sha256_hex(bytes));
    EXPECT_EQ(f["bytes"], bytes.size());
  }
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().filename() != "manifest.json") EXPECT_TRUE(listed.count(e.path().filename().string())) << e.path();
  // known digest of the empty string
  EXPECT_EQ(ex::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Run, CsvIsByteIdenticalAcrossRerunsAndWorkers) {
  const auto a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  ASSERT_EQ(run(kSimulate, a, 1).exit_code, 0);
  ASSERT_EQ(run(kSimulate, b, 1).exit_code, 0);
  ASSERT_EQ(run(kSimulate, c, 5).exit_code, 0);
  const auto sa = ex::read_file(a / "samples.csv");
  EXPECT_EQ(sa, ex::read_file(b / "samples.csv"));
  EXPECT_EQ(sa, ex::read_file(c / "samples.csv"));
  EXPECT_EQ(std::count(sa.begin(), sa.end(), '\n'), 301);
  EXPECT_EQ(sa.substr(0, 10), "index,S_n\n");
}

TEST(Run, NonConvergenceIsExitThree) {
  const auto out = scratch("noconv");
  const auto res = run(R"({"kind":"spectrum","lattice":{"L":8,"eps":0.0},
    "params":{"k":1,"N":27,"method":"exact","tol":1e-300}})", out);
  EXPECT_EQ(res.exit_code, 3);
  EXPECT_EQ(manifest(out)["exit_code"], 3);
}

TEST(Run, ObservableOutsideModeledSitesIsRejected) {
  const auto out = scratch("support");
  const auto res = run(R"({"kind":"lambda-curve","lattice":{"L":8,"eps":0.0},
    "observable":{"kind":"coordinate","site":[3]},"params":{"k":1,"N":27,"t_grid":[0,0.1]}})", out);
  EXPECT_EQ(res.exit_code, 2);
}

TEST(Run, SpectrumWritesMatrixMarket) {
  const auto out = scratch("mtx");
  const auto res = run(R"({"kind":"spectrum","lattice":{"L":8,"eps":0.0},
    "params":{"k":1,"N":27,"method":"exact"},"thresholds":{"gap_min":0.5}})", out);
  ASSERT_EQ(res.exit_code, 0);
  const auto mtx = ex::read_file(out / "operator.mtx");
  EXPECT_EQ(mtx.rfind("%%MatrixMarket matrix coordinate real general", 0), 0u);
  EXPECT_TRUE(res.report["checks"][0]["pass"].get<bool>());
  EXPECT_NEAR(res.report["spectrum"]["column_sum_min"].get<double>(), 1.0, 1e-12);
}

TEST(Summary, EmptyDirectoryIsAnError) {
  const auto out = scratch("empty");
  fs::create_directories(out);
  EXPECT_THROW(ex::report_summary(out), ConfigError);
  EXPECT_THROW(ex::report_summary(out / "absent"), ConfigError);
}

TEST(Summary, LltPrintsRatiosPerInterval) {
  const auto out = scratch("llt");
  const auto res = run(R"({"kind":"llt","lattice":{"L":8,"eps":0.02},
    "observable":{"kind":"coordinate","site":[0],"center":true,"center_steps":50000},
    "params":{"n":64,"n_traj":2000,"sigma2":0.065,"intervals":[[-0.5,0.5],[0.3,0.8]]},
    "thresholds":{"rel_tol":0.5}})", out);
  ASSERT_EQ(res.exit_code, 0);
  const auto text = ex::report_summary(out);
  EXPECT_NE(text.find("[-0.5, 0.5]"), std::string::npos);
  EXPECT_NE(text.find("[0.3, 0.8]"), std::string::npos);
  EXPECT_NE(text.find("|I|"), std::string::npos);
  EXPECT_NE(text.find("rho[0.3,0.8]"), std::string::npos);
}

TEST(Summary, VarianceTrianglePrintsThreeEstimates) {
  const auto out = scratch("triangle");
  const auto res = run(R"({"kind":"variance","lattice":{"L":8,"eps":0.0},
    "observable":{"kind":"coordinate","site":[0],"center":true,"center_steps":50000},
    "params":{"K":10,"n_avg":100000,"n":128,"n_traj":500,"k":1,"N":27,"method":"exact"},
    "thresholds":{"rel_tol":0.5}})", out);
  ASSERT_EQ(res.exit_code, 0);
  EXPECT_EQ(res.report["estimates"].size(), 3u);
  EXPECT_EQ(res.report["checks"].size(), 3u);
  const auto text = ex::report_summary(out);
  for (const char* name : {"green_kubo", "ensemble", "spectral"}) EXPECT_NE(text.find(name), std::string::npos);
}

TEST(Summary, CltAndFailureRuns) {
  auto out = scratch("clt");
  ASSERT_EQ(run(R"({"kind":"clt","lattice":{"L":8,"eps":0.02},
    "observable":{"kind":"zero"},"params":{"n":16,"n_traj":50,"sigma2":0.0}})", out).exit_code, 2);
  auto text = ex::report_summary(out);
  EXPECT_NE(text.find("exit    2"), std::string::npos);
  EXPECT_NE(text.find("error"), std::string::npos);
  out = scratch("clt_ok");
  ASSERT_EQ(run(R"({"kind":"clt","lattice":{"L":8,"eps":0.02},
    "observable":{"kind":"coordinate","site":[0],"center":true,"center_steps":50000},
    "params":{"n":64,"n_traj":1000,"K":10,"n_avg":100000},"thresholds":{"ks_max":0.2}})", out).exit_code, 0);
  text = ex::report_summary(out);
  EXPECT_NE(text.find("KS distance"), std::string::npos);
  EXPECT_NE(text.find("PASS  ks_distance"), std::string::npos);
}

TEST(Run, BvSuiteAndRadiusMap) {
  auto out = scratch("bv");
  auto res = run(R"({"kind":"bv-suite","lattice":{"L":3},"params":{"n_instances":300,"M_max":60}})", out);
  ASSERT_EQ(res.exit_code, 0);
  EXPECT_EQ(res.report["bv"]["violations"], 0);
  out = scratch("radius");
  res = run(R"({"kind":"radius-map","lattice":{"L":8,"eps":0.0},
    "observable":{"kind":"constant","value":1.0},
    "params":{"k":1,"N":27,"method":"exact","t_grid":[0,1,2],"n_power":60}})", out);
  ASSERT_EQ(res.exit_code, 0);
  for (const auto& p : res.report["radius_map"]["points"]) EXPECT_NEAR(p["radius"].get<double>(), 1.0, 1e-9);
}
