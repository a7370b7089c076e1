// qcd: calibrate, sweep and verify decentralized change detectors.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qcd/cli/commands.hpp"

namespace {

void add_common(CLI::App* sub, qcd::cli::CommandOptions& o) {
  sub->add_option("--config", o.config_path, "TOML configuration file (built-in defaults when omitted)")
      ->envname("QCD_CONFIG");
  sub->add_option("--out", o.out_dir, "Output directory, created if absent")->envname("QCD_OUT")->capture_default_str();
  sub->add_option("--seed", o.seed, "Master seed (default: run.seed from the configuration, 1)")->envname("QCD_SEED");
  sub->add_option("--jobs", o.jobs, "Worker threads; results do not depend on it")
      ->envname("QCD_JOBS")
      ->check(CLI::PositiveNumber);
  sub->add_flag("--dry-run", o.dry_run, "Print the resolved plan and write nothing");
  sub->add_option("--cache", o.cache_path, "Calibration cache file (default: <out>/calibration.json)");
  sub->add_flag("-v,--verbose", o.verbosity, "Progress messages on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace qcd::cli;
  CLI::App app{"Quickest change detection with decentralized sensors"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "qcd 1.0.0");

  CommandOptions o;

  auto* cal = app.add_subcommand("calibrate", "Calibrate quantizers and thresholds; write the cache");
  add_common(cal, o);
  auto* sweep = app.add_subcommand("sweep", "Operating-characteristic sweep; one CSV per detector plus summary.csv");
  add_common(sweep, o);
  sweep->add_flag("--calibrate", o.calibrate, "Compute calibrations missing from the cache");
  sweep->add_flag("--gnuplot", o.gnuplot, "Also write gnuplot .dat files");
  auto* verify = app.add_subcommand("verify", "Run the cross-module checks and print PASS/FAIL lines");
  add_common(verify, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kSuccess : kUsageError;
  }

  try {
    if (cal->parsed()) return cmd_calibrate(o, std::cout, std::cerr);
    if (sweep->parsed()) return cmd_sweep(o, std::cout, std::cerr);
    return cmd_verify(o, std::cout, std::cerr);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const qcd::CalibrationError& e) {
    std::cerr << "calibration failed: " << e.what() << "\n";
    return kCalibrationFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCalibrationFailure;
  }
}
