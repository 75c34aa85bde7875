// cml-lab run <config.json> [--workers N] [--out DIR]
// cml-lab summary <DIR>

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cml/experiment.hpp"

namespace ex = cml::experiment;

int main(int argc, char** argv) {
  CLI::App app{"Coupled map lattice experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run one experiment config");
  std::string config;
  unsigned workers = 0;
  std::string out;
  run->add_option("config", config, "experiment config (JSON)")->required();
  run->add_option("--workers", workers, "worker threads (default: $CML_LAB_WORKERS, else all cores)")
      ->check(CLI::PositiveNumber);
  run->add_option("--out", out, "output directory (overrides the config)");

  auto* summary = app.add_subcommand("summary", "summarize a finished run");
  std::string dir;
  summary->add_option("dir", dir, "output directory of a run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // usage errors are validation failures too
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ex::kValidation;
  }

  if (*run) {
    const auto res = ex::run_config_file(config, out.empty() ? std::nullopt : std::optional<std::filesystem::path>(out),
                                         workers);
    for (const auto& e : res.errors) std::cerr << "cml-lab: " << e << "\n";
    std::cerr << "cml-lab: wrote " << res.out_dir.string() << " (exit " << res.exit_code << ")\n";
    return res.exit_code;
  }
  try {
    std::cout << ex::report_summary(dir);
  } catch (const cml::Error& e) {
    std::cerr << "cml-lab: " << e.what() << "\n";
    return ex::kValidation;
  }
  return 0;
}
