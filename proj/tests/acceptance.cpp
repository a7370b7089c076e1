// Acceptance runner: one PASS/FAIL line per criterion, preceded by indented
// detail lines. Exit status is nonzero when any selected criterion fails.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qcd/cli/config.hpp"
#include "qcd/cli/csv.hpp"
#include "qcd/simharness.hpp"

using namespace qcd;
namespace fs = std::filesystem;

namespace {

struct Run {
  unsigned jobs = 1;
  std::uint64_t seed = 1;
};

/// Detail lines plus a running verdict.
class Checks {
 public:
  void check(bool ok, const std::string& name, const std::string& detail) {
    std::cout << "  " << (ok ? "ok   " : "MISS ") << name << ": " << detail << "\n" << std::flush;
    ++total_;
    if (!ok) ++missed_;
  }
  void info(const std::string& line) { std::cout << "  info " << line << "\n" << std::flush; }
  bool passed() const { return total_ > 0 && missed_ == 0; }
  std::string tally() const { return std::to_string(total_ - missed_) + "/" + std::to_string(total_) + " checks"; }

 private:
  int total_ = 0, missed_ = 0;
};

std::string f(double v) { return csv::number(v); }
std::string f(const Estimate& e) { return f(e.mean) + " +- " + f(e.std_error); }

void near(Checks& c, const std::string& name, double got, double want, double tol) {
  c.check(std::abs(got - want) <= tol, name, f(got) + " vs " + f(want) + " +- " + f(tol));
}

// 1. Tabulated quantizer values for one Gaussian sensor with mu = 1.
void quantizer_table(const Run& run, Checks& c) {
  const auto model = SensorModel::gaussian(1, 1.0);
  const ExitSimOptions mc{4'000'000, run.seed, run.jobs};
  DeltaSearchOptions dopt;
  dopt.sim = mc;
  dopt.tolerance = 1e-3;
  struct Row {
    double r, delta, delta_tol, l1, l1_tol;
    std::vector<double> l2, l2_tol;
  };
  const std::vector<Row> rows = {{3.0, 1.287, 0.02, 1.87, 0.03, {1.54, 2.94}, {0.03, 0.05}},
                                 {6.0, 2.54, 0.03, 3.12, 0.04, {2.80, 3.62}, {0.05, 0.06}}};
  for (const auto& row : rows) {
    const std::string r = "r=" + f(row.r);
    const DeltaPair dp = calibrate_delta(model, 0, row.r, Regime::post_change, dopt);
    near(c, "Delta " + r, dp.delta_bar, row.delta, row.delta_tol);
    const double delta = dp.delta_bar;

    const MessageLlrs one = calibrate_llr(model, 0, delta, delta, {}, mc);
    near(c, "Lambda_1 " + r + " d=1", one.lambda_bar[0], row.l1, row.l1_tol);

    const OvershootLevels lv = calibrate_levels(model, 0, delta, delta, 2, mc);
    if (row.r == 3.0) near(c, "eps_1 " + r + " d=2", lv.eps_bar[0], 0.583, 0.02);
    const MessageLlrs two = calibrate_llr(model, 0, delta, delta, lv, mc);
    for (int j = 0; j < 2; ++j) {
      near(c, "Lambda_" + std::to_string(j + 1) + " " + r + " d=2", two.lambda_bar[static_cast<std::size_t>(j)],
           row.l2[static_cast<std::size_t>(j)], row.l2_tol[static_cast<std::size_t>(j)]);
    }
    c.info(r + " lower side: Lambda_under d=1 " + f(one.lambda_under[0]) + ", d=2 (" + f(two.lambda_under[0]) + ", " +
           f(two.lambda_under[1]) + ")");
  }
}

// 2. Continuous-time closed forms on a Brownian LLR, dt = 1e-3.
void closed_forms(const Run& run, Checks& c) {
  const auto model = SensorModel::brownian(1, 1.0, 1e-3);
  const DetectorSpec cusum;
  FalseAlarmLadder ladder(cusum, model, {40'000, run.seed, run.jobs, 20'000'000'000ULL});
  for (double nu : {2.0, 3.0, 4.0}) {
    const auto cf = ct_closed_forms(nu);
    const auto fa = summarize_false_alarm(ladder.at(nu), model);
    const double rel_fa = fa.gamma_direct.mean / cf.gamma - 1.0;
    c.check(std::abs(rel_fa) <= 0.03, "Einf[-u_T] nu=" + f(nu),
            f(fa.gamma_direct) + " vs e^nu-nu-1=" + f(cf.gamma) + " rel.err=" + f(rel_fa));
    const auto de = estimate_delay(cusum, model, nu, {40'000, run.seed, run.jobs});
    const double rel_d = de.kl.mean / cf.delay - 1.0;
    c.check(std::abs(rel_d) <= 0.03, "E0[u_T] nu=" + f(nu),
            f(de.kl) + " vs e^-nu+nu-1=" + f(cf.delay) + " rel.err=" + f(rel_d));
  }
  const auto g = grid_refinement(1.0, 3.0, 1e-3, 10, 100'000, run.seed, run.jobs);
  const double ec = std::abs(g.coarse.mean - g.closed_form), ef = std::abs(g.fine.mean - g.closed_form);
  c.check(ef < ec, "grid refinement nu=3 dt 1e-3 -> 1e-4",
          "|err| " + f(ec) + " -> " + f(ef) + ", paired coarse-fine " + f(g.coarse_minus_fine));
}

// 3. Loss of D-CUSUM against CUSUM, K = 2 Brownian sensors.
void loss_bound(const Run& run, Checks& c) {
  LossBoundOptions opt;
  opt.dt = 1e-3;
  opt.fa_reps = 2000;
  opt.delay_reps = 10'000;
  opt.seed = run.seed;
  opt.jobs = run.jobs;
  opt.step_budget = 20'000'000'000ULL;
  const std::vector<double> deltas = {1.0, 0.5, 0.25};
  const std::vector<double> gammas = {1e2, 1e3};
  const auto pts = verify_loss_bound(2, deltas, gammas, opt);
  for (const auto& p : pts) {
    const double limit = p.bound + 3.0 * p.difference.std_error;
    const std::string name = "J[D]-J[C] delta=" + f(p.delta) + " gamma=" + f(p.gamma);
    const std::string detail = f(p.difference) + " limit " + f(limit) + " (nu=" + f(p.nu) + ", nu_tilde=" +
                               f(p.nu_tilde) + ")";
    if (p.delta == 0.5) c.check(p.difference.mean <= limit, name, detail);
    else c.info(name + " " + detail);
  }
  for (double g : gammas) {
    const LossBoundPoint* prev = nullptr;
    for (const auto& p : pts) {
      if (p.gamma != g) continue;
      if (prev) {
        const double tol = 3.0 * combined_std_error(prev->difference, p.difference);
        c.check(p.difference.mean <= prev->difference.mean + tol,
                "nonincreasing gamma=" + f(g) + " delta " + f(prev->delta) + " -> " + f(p.delta),
                f(prev->difference.mean) + " -> " + f(p.difference.mean) + " tol " + f(tol));
      }
      prev = &p;
    }
  }
}

DetectorSpec dcusum(const SensorModel& model, int d, const Run& run) {
  const ExitSimOptions mc{1'000'000, run.seed, run.jobs};
  DeltaSearchOptions dopt;
  dopt.sim = mc;
  DetectorSpec s;
  s.kind = DetectorKind::dcusum;
  s.quantizer = to_config(calibrate_quantizer(model, 3.0, d, dopt, mc));
  return s;
}

const std::vector<double> kSweepGammas = {1e2, 1e3, 1e4, 1e5};

// 4. Threshold bound on every calibrated D-CUSUM point of the K = 5 sweep.
void threshold_bound(const Run& run, Checks& c) {
  const auto model = SensorModel::gaussian(5, 1.0);
  const double ibar = kl_numbers(model).ibar_inf;
  for (int d : {1, 2}) {
    ThresholdSearchOptions search;
    search.ladder = {1000, run.seed, run.jobs, 1'000'000'000};
    FalseAlarmLadder ladder(dcusum(model, d, run), model, search.ladder);
    for (double g : kSweepGammas) {
      const CalibrationRecord rec = calibrate_threshold(ladder, {g, GammaMeasure::kl_units}, search);
      const double nu = std::max(rec.threshold, rec.threshold_low);
      const double bound = nu_tilde_bound(g, ibar);
      c.check(nu <= bound, "d=" + std::to_string(d) + " gamma=" + f(g),
              "nu_tilde " + f(nu) + " <= " + f(bound) + " (achieved gamma " + f(rec.achieved_gamma) + ")");
    }
  }
}

// 5. D-CUSUM stays parallel to CUSUM while Q-CUSUM drifts away.
void parallelism(const Run& run, Checks& c) {
  ExperimentSpec spec;
  spec.model = SensorModel::gaussian(5, 1.0);
  spec.gammas = kSweepGammas;
  spec.seed = run.seed;
  spec.jobs = run.jobs;
  spec.delay_reps = 10'000;
  spec.fa_reps = 1000;
  spec.step_budget = 1'000'000'000;
  DetectorSpec q;
  q.kind = DetectorKind::qcusum;
  q.qcusum = calibrate_qcusum(spec.model, 3, 2, {1'000'000, run.seed, {}});
  spec.detectors = {{"centralized", DetectorSpec{}}, {"dcusum_d2", dcusum(spec.model, 2, run)}, {"qcusum_b2", q}};
  const auto curves = oc_sweep(spec);
  for (const auto& curve : curves) {
    for (const auto& p : curve) {
      c.info(p.detector + " gamma=" + f(p.gamma) + " threshold=" + f(p.threshold) + " delay=" + f(p.delay_steps) +
             (p.error.empty() ? "" : " error: " + p.error));
    }
  }
  const double limit = 0.15 * curves[0].back().delay_steps.mean;
  const auto sd = delay_difference_spread(curves[1], curves[0]);
  const auto sq = delay_difference_spread(curves[2], curves[0]);
  auto diffs = [](const SpreadSummary& s) {
    std::string out;
    for (const auto& e : s.differences) out += (out.empty() ? "" : ", ") + f(e);
    return out;
  };
  c.check(sd.spread <= limit, "D-CUSUM spread", f(sd.spread) + " <= " + f(limit) + " [" + diffs(sd) + "]");
  c.check(sq.spread > limit, "Q-CUSUM spread", f(sq.spread) + " > " + f(limit) + " [" + diffs(sq) + "]");
}

// 6. Ratio estimator against direct CUSUM runs, and the Wald identity.
void sprt(const Run& run, Checks& c) {
  const DetectorSpec cusum;
  for (std::size_t k : {1u, 5u}) {
    const auto model = SensorModel::gaussian(k, 1.0);
    FalseAlarmLadder ladder(cusum, model, {50'000, run.seed, run.jobs, 10'000'000'000ULL});
    for (double nu : {4.0, 6.0}) {
      const std::string tag = " K=" + std::to_string(k) + " nu=" + f(nu);
      const SprtOracle o = sprt_cusum_oracle(model, nu, 1'000'000, run.seed, run.jobs);
      const auto fa = summarize_false_alarm(ladder.at(nu), model);
      const auto de = estimate_delay(cusum, model, nu, {50'000, run.seed, run.jobs});
      auto agree = [&](const std::string& name, const Estimate& a, const Estimate& b) {
        const double tol = 3.0 * combined_std_error(a, b);
        c.check(std::abs(a.mean - b.mean) <= tol, name + tag,
                f(a) + " vs " + f(b) + " |diff| " + f(std::abs(a.mean - b.mean)) + " tol " + f(tol));
      };
      agree("E0[u_T] oracle/direct", o.e0_u_at_stop, de.kl);
      agree("Einf[-u_T] oracle/direct", o.einf_minus_u_at_stop, fa.gamma_direct);
      agree("Einf[-u_T] vs K Ibar_inf Einf[T]", fa.gamma_direct, fa.gamma_wald);
    }
  }
}

// 7. Fresh exits fall into each overshoot cell with probability 1/d.
void cell_masses(const Run& run, Checks& c) {
  const auto model = SensorModel::gaussian(1, 1.0);
  const ExitSimOptions mc{1'000'000, run.seed, run.jobs};
  DeltaSearchOptions dopt;
  dopt.sim = mc;
  const double delta = calibrate_delta(model, 0, 3.0, Regime::post_change, dopt).delta_bar;
  const ExitSimOptions fresh{2'000'000, run.seed + 1, run.jobs};
  for (int d : {2, 4}) {
    const OvershootLevels lv = calibrate_levels(model, 0, delta, delta, d, mc);
    const SensorQuantizer q{delta, delta, lv.eps_bar, lv.eps_under, std::vector<double>(d, 0.0),
                            std::vector<double>(d, 0.0)};
    for (Regime regime : {Regime::post_change, Regime::pre_change}) {
      const int sign = regime == Regime::post_change ? 1 : -1;
      using Counts = std::vector<double>;
      const auto parts = for_each_exit<Counts>(
          model, 0, delta, delta, regime, fresh, [d] { return Counts(static_cast<std::size_t>(d), 0.0); },
          [&](Counts& n, const ExitSample& e) {
            const int z = quantize_overshoot(e.ell, q);
            if (z * sign > 0) n[static_cast<std::size_t>(std::abs(z) - 1)] += 1.0;
          });
      Counts n(static_cast<std::size_t>(d), 0.0);
      for (const auto& p : parts) {
        for (int j = 0; j < d; ++j) n[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)];
      }
      double total = 0.0;
      for (double x : n) total += x;
      for (int j = 0; j < d; ++j) {
        near(c, "d=" + std::to_string(d) + " cell " + std::to_string(sign * (j + 1)),
             n[static_cast<std::size_t>(j)] / total, 1.0 / d, 0.01);
      }
    }
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int shell(const std::string& args, const fs::path& log) {
  const std::string cmd = "env -u QCD_CONFIG -u QCD_OUT -u QCD_SEED -u QCD_JOBS " + std::string(QCD_CLI_PATH) + " " +
                          args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 8. CLI sweeps: serial against parallel, and a rerun from the resolved config.
void determinism(const Run& run, Checks& c) {
  const fs::path dir = fs::temp_directory_path() / ("qcd_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "sweep.toml") << "[run]\nseed = " << run.seed
                                   << "\n\n[model]\nsensors = 5\nmu = 1.0\n\n"
                                      "[quantizer]\nperiod = 3\nexit_reps = 200_000\n\n"
                                      "[sweep]\ngammas = [100, 1000]\ndelay_reps = 2000\nfa_reps = 300\n";
  const auto cfg = (dir / "sweep.toml").string();
  const int serial = shell("sweep --calibrate --config '" + cfg + "' --out '" + (dir / "serial").string() + "' --jobs 1",
                           dir / "serial.log");
  const int parallel = shell(
      "sweep --calibrate --config '" + cfg + "' --out '" + (dir / "parallel").string() + "' --jobs 4", dir / "par.log");
  const int rerun = shell("sweep --calibrate --config '" + (dir / "serial" / "resolved_config.toml").string() +
                              "' --out '" + (dir / "rerun").string() + "'",
                          dir / "rerun.log");
  c.check(serial == 0 && parallel == 0 && rerun == 0, "exit codes",
          std::to_string(serial) + " " + std::to_string(parallel) + " " + std::to_string(rerun));

  const auto resolved = cli::resolve(cli::load_file(cfg));
  const std::string hash = cli::config_hash(resolved);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir / "serial")) files.push_back(e.path().filename());
  std::sort(files.begin(), files.end());
  for (const auto& name : files) {
    const std::string a = slurp(dir / "serial" / name);
    if (name != "resolved_config.toml") {
      c.check(!a.empty() && a == slurp(dir / "parallel" / name), name.string() + " serial == parallel",
              std::to_string(a.size()) + " bytes");
    }
    c.check(!a.empty() && a == slurp(dir / "rerun" / name), name.string() + " rerun from resolved config",
            std::to_string(a.size()) + " bytes");
  }
  c.check(files.size() >= 6, "output files", std::to_string(files.size()));
  const std::string summary = slurp(dir / "serial" / "summary.csv");
  c.check(summary.find(hash) != std::string::npos, "summary carries config hash", hash);
  const std::string table = slurp(dir / "serial" / "centralized.csv");
  c.check(table.find("," + std::to_string(run.seed) + "\r\n") != std::string::npos, "rows carry the seed",
          std::to_string(run.seed));
  fs::remove_all(dir);
}

struct Criterion {
  int id;
  const char* title;
  std::function<void(const Run&, Checks&)> body;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  int only = 0;
  Run run;
  app.add_option("--criterion", only, "Run a single criterion (1-8); default all")->check(CLI::Range(0, 8));
  app.add_option("--jobs", run.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--seed", run.seed, "Base seed");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {1, "quantizer table values", quantizer_table},
      {2, "continuous-time closed forms", closed_forms},
      {3, "D-CUSUM loss bound", loss_bound},
      {4, "fusion threshold bound", threshold_bound},
      {5, "second-order parallelism", parallelism},
      {6, "SPRT oracle and Wald identity", sprt},
      {7, "overshoot cell masses", cell_masses},
      {8, "determinism", determinism},
  };
  bool ok = true;
  for (const auto& cr : all) {
    if (only != 0 && cr.id != only) continue;
    Checks checks;
    std::string error;
    const auto start = std::chrono::steady_clock::now();
    try {
      cr.body(run, checks);
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = error.empty() && checks.passed();
    ok = ok && pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << cr.id << " " << cr.title << " (" << checks.tally()
              << (error.empty() ? "" : ", error: " + error) << ", " << f(secs) << " s)\n"
              << std::flush;
  }
  return ok ? 0 : 1;
}
