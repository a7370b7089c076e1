#ifndef QCD_SIMHARNESS_HPP
#define QCD_SIMHARNESS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qcd/calibration.hpp"
#include "qcd/detectors.hpp"
#include "qcd/model.hpp"
#include "qcd/parallel.hpp"
#include "qcd/quantizer.hpp"
#include "qcd/stats.hpp"

namespace qcd {

struct DelayOptions {
  std::size_t reps = 10'000;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::int64_t horizon = 10'000'000;
  std::int64_t change_time = 0;
  double max_censored = 1e-3;
};

/// Detection delay after the change, averaged over replications that had not
/// alarmed before it. Per-replication samples are kept for paired comparisons
/// (replication i always sees the same path, whatever the detector).
struct DelayEstimate {
  Estimate steps;
  Estimate kl;  ///< E0[u_T - u_tau]
  Estimate physical;
  double censored_fraction = 0.0;
  std::size_t early_alarms = 0;
  double msgs_per_step_per_sensor = 0.0;
  std::vector<double> step_samples;  ///< NaN for early alarms and censored runs
  std::vector<double> kl_samples;
};

inline DelayEstimate estimate_delay(const DetectorSpec& spec, const SensorModel& model, double threshold,
                                    const DelayOptions& opt = {}) {
  if (std::isnan(threshold)) throw std::invalid_argument("estimate_delay: threshold is NaN");
  if (opt.change_time < 0) throw std::invalid_argument("estimate_delay: negative change time");
  struct One {
    bool early = false, censored = false;
    double steps = 0.0, kl = 0.0, messages = 0.0;
  };
  const std::int64_t tau = opt.change_time;
  auto runs = parallel_map(opt.reps, opt.jobs, [&](std::size_t i) {
    DetectorRun run(spec, model, tau, opt.seed, replication_id(RunPurpose::delay, i), threshold);
    One o;
    double u_tau = 0.0;
    std::int64_t msgs_tau = 0;
    while (run.time() < tau + opt.horizon) {
      const Observation obs = run.step(threshold);
      if (obs.evaluated && obs.statistic >= threshold) {
        if (run.time() <= tau) {
          o.early = true;
          return o;
        }
        o.steps = static_cast<double>(run.time() - tau);
        o.kl = (obs.floor && std::isfinite(threshold) ? *obs.floor + threshold : run.u()) - u_tau;
        o.messages = static_cast<double>(run.messages() - msgs_tau);
        return o;
      }
      if (run.time() == tau) {
        u_tau = run.u();
        msgs_tau = run.messages();
      }
    }
    o.censored = true;
    return o;
  });
  DelayEstimate e;
  RunningStats steps, kl;
  double msgs = 0.0, total_steps = 0.0;
  std::size_t censored = 0;
  for (const auto& o : runs) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (o.early || o.censored) {
      e.early_alarms += o.early ? 1 : 0;
      censored += o.censored ? 1 : 0;
      e.step_samples.push_back(nan);
      e.kl_samples.push_back(nan);
      continue;
    }
    steps.add(o.steps);
    kl.add(o.kl);
    msgs += o.messages;
    total_steps += o.steps;
    e.step_samples.push_back(o.steps);
    e.kl_samples.push_back(o.kl);
  }
  e.censored_fraction = static_cast<double>(censored) / static_cast<double>(opt.reps);
  if (e.censored_fraction > opt.max_censored) {
    throw CalibrationError("estimate_delay: censored fraction " + std::to_string(e.censored_fraction) +
                           " exceeds " + std::to_string(opt.max_censored));
  }
  if (steps.count() == 0) throw CalibrationError("estimate_delay: every replication alarmed before the change");
  e.steps = steps.estimate();
  e.kl = kl.estimate();
  e.physical = {e.steps.mean * model.dt, e.steps.std_error * model.dt, e.steps.n};
  e.msgs_per_step_per_sensor = msgs / (total_steps * static_cast<double>(model.sensors()));
  return e;
}

/// Delay of a calibrated rule. A randomized rule is evaluated at both of its
/// thresholds on the same paths and averaged per replication over the coin.
inline DelayEstimate estimate_delay(const DetectorSpec& spec, const SensorModel& model, const CalibrationRecord& rec,
                                    const DelayOptions& opt = {}) {
  DelayEstimate hi = estimate_delay(spec, model, rec.threshold, opt);
  if (!rec.randomized()) return hi;
  const DelayEstimate lo = estimate_delay(spec, model, rec.threshold_low, opt);
  const double w = rec.mix_weight;
  DelayEstimate m;
  RunningStats steps, kl;
  for (std::size_t i = 0; i < hi.step_samples.size(); ++i) {
    const double st = w * hi.step_samples[i] + (1.0 - w) * lo.step_samples[i];
    const double k = w * hi.kl_samples[i] + (1.0 - w) * lo.kl_samples[i];
    m.step_samples.push_back(st);
    m.kl_samples.push_back(k);
    if (std::isnan(st)) continue;
    steps.add(st);
    kl.add(k);
  }
  m.steps = steps.estimate();
  m.kl = kl.estimate();
  m.physical = {m.steps.mean * model.dt, m.steps.std_error * model.dt, m.steps.n};
  m.censored_fraction = std::max(hi.censored_fraction, lo.censored_fraction);
  m.early_alarms = std::max(hi.early_alarms, lo.early_alarms);
  m.msgs_per_step_per_sensor = w * hi.msgs_per_step_per_sensor + (1.0 - w) * lo.msgs_per_step_per_sensor;
  return m;
}

/// Mean and standard error of a - b over replications where both are defined.
inline Estimate paired_difference(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_difference: size mismatch");
  RunningStats s;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isnan(a[i]) && !std::isnan(b[i])) s.add(a[i] - b[i]);
  }
  return s.estimate();
}

struct FalseAlarmOptions {
  std::size_t reps = 1000;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::uint64_t step_budget = 100'000'000;
};

/// E_inf[T] and E_inf[-u_T] by running pre-change paths to the threshold.
inline FalseAlarmEstimate estimate_false_alarm(const DetectorSpec& spec, const SensorModel& model, double threshold,
                                               const FalseAlarmOptions& opt = {}) {
  if (!(threshold > 0.0)) throw std::invalid_argument("estimate_false_alarm: threshold must be positive");
  FalseAlarmLadder ladder(spec, model, {opt.reps, opt.seed, opt.jobs, opt.step_budget});
  return summarize_false_alarm(ladder.at(threshold), model);
}

struct CommunicationAccount {
  double msgs_per_step_per_sensor = 0.0;
  std::int64_t total_bits = 0;
};

inline CommunicationAccount communication_account(std::int64_t messages, std::int64_t horizon, std::size_t sensors,
                                                  int d) {
  if (horizon <= 0 || sensors == 0) throw std::invalid_argument("communication_account: empty horizon or sensor set");
  return {static_cast<double>(messages) / (static_cast<double>(horizon) * static_cast<double>(sensors)),
          messages * bits_per_message(d)};
}

/// Bits carried by one transmission of a detector; raw observations count as 64.
inline int transmission_bits(const DetectorSpec& spec) {
  switch (spec.kind) {
    case DetectorKind::centralized: return 64;
    case DetectorKind::dcusum: {
      int b = 0;
      for (const auto& q : spec.quantizer.sensors) b = std::max(b, bits_per_message(q.d()));
      return b;
    }
    case DetectorKind::qcusum: {
      int b = 0;
      while ((1 << b) < spec.qcusum.alphabet) ++b;
      return b;
    }
    case DetectorKind::mei:
    case DetectorKind::mincusum: return 1;
  }
  return 0;
}

struct OCPoint {
  std::string detector;
  double gamma = 0.0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  double threshold_low = std::numeric_limits<double>::quiet_NaN();
  double mix_weight = 1.0;
  Estimate delay_steps;
  Estimate delay_kl;
  Estimate fa_period_steps;
  Estimate achieved_gamma;
  double msgs_per_step = std::numeric_limits<double>::quiet_NaN();
  int bits_per_msg = 0;
  std::size_t reps = 0;
  std::uint64_t seed = 0;
  std::string error;  ///< empty when the point succeeded
  std::vector<double> delay_samples;
};

struct SweepDetector {
  std::string label;
  DetectorSpec spec;
};

struct ExperimentSpec {
  SensorModel model;
  std::vector<SweepDetector> detectors;
  std::vector<double> gammas;
  GammaMeasure measure = GammaMeasure::kl_units;
  std::uint64_t seed = 1;
  std::size_t delay_reps = 10'000;
  std::size_t fa_reps = 1000;
  std::uint64_t step_budget = 100'000'000;
  unsigned jobs = 1;

  void validate() const {
    model.validate();
    if (gammas.empty()) throw std::invalid_argument("ExperimentSpec: empty gamma grid");
    for (std::size_t i = 0; i < gammas.size(); ++i) {
      if (!(gammas[i] > 0.0)) throw std::invalid_argument("ExperimentSpec: gammas must be positive");
      if (i > 0 && !(gammas[i] > gammas[i - 1])) throw std::invalid_argument("ExperimentSpec: gamma grid must increase");
    }
    if (detectors.empty()) throw std::invalid_argument("ExperimentSpec: no detectors");
    if (delay_reps < 2 || fa_reps < 2) throw std::invalid_argument("ExperimentSpec: need at least two replications");
  }
};

/// Calibrates one detector over the gamma grid and estimates its delays.
/// Failures are recorded per point; later points of the same detector are
/// still attempted when an earlier one fails.
inline std::vector<OCPoint> oc_curve(const ExperimentSpec& spec, const SweepDetector& det) {
  FalseAlarmLadder ladder(det.spec, spec.model, {spec.fa_reps, spec.seed, spec.jobs, spec.step_budget});
  ThresholdSearchOptions search;
  search.ladder = {spec.fa_reps, spec.seed, spec.jobs, spec.step_budget};
  std::vector<OCPoint> out;
  for (double g : spec.gammas) {
    OCPoint p;
    p.detector = det.label;
    p.gamma = g;
    p.bits_per_msg = transmission_bits(det.spec);
    p.seed = spec.seed;
    p.reps = spec.delay_reps;
    try {
      const CalibrationRecord rec = calibrate_threshold(ladder, {g, spec.measure}, search);
      p.threshold = rec.threshold;
      p.threshold_low = rec.threshold_low;
      p.mix_weight = rec.mix_weight;
      p.fa_period_steps = rec.fa_period_steps;
      p.achieved_gamma = rec.achieved_gamma;
      const DelayEstimate d = estimate_delay(det.spec, spec.model, rec, {spec.delay_reps, spec.seed, spec.jobs});
      p.delay_steps = d.steps;
      p.delay_kl = d.kl;
      p.msgs_per_step = det.spec.kind == DetectorKind::centralized ? 1.0 : d.msgs_per_step_per_sensor;
      p.delay_samples = d.step_samples;
    } catch (const std::exception& ex) {
      p.error = ex.what();
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<std::vector<OCPoint>> oc_sweep(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<std::vector<OCPoint>> out;
  for (const auto& d : spec.detectors) out.push_back(oc_curve(spec, d));
  return out;
}

/// Spread max - min over gamma of the paired delay difference between two
/// OC curves computed on the same seeds.
struct SpreadSummary {
  std::vector<Estimate> differences;
  double spread = 0.0;
};

inline SpreadSummary delay_difference_spread(std::span<const OCPoint> curve, std::span<const OCPoint> reference) {
  if (curve.size() != reference.size() || curve.empty()) {
    throw std::invalid_argument("delay_difference_spread: curves must share the gamma grid");
  }
  SpreadSummary s;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (!curve[i].error.empty() || !reference[i].error.empty()) {
      throw std::runtime_error("delay_difference_spread: failed point at gamma " + std::to_string(curve[i].gamma));
    }
    const Estimate d = paired_difference(curve[i].delay_samples, reference[i].delay_samples);
    s.differences.push_back(d);
    lo = std::min(lo, d.mean);
    hi = std::max(hi, d.mean);
  }
  s.spread = hi - lo;
  return s;
}

struct LossBoundOptions {
  double mu = 1.0;
  double dt = 1e-3;
  std::size_t fa_reps = 1000;
  std::size_t delay_reps = 4000;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::uint64_t step_budget = 2'000'000'000;
};

struct LossBoundPoint {
  double delta = 0.0;
  double gamma = 0.0;
  double nu_closed_form = 0.0;  ///< inverse of gamma = e^nu - nu - 1
  double nu = 0.0;              ///< centralized threshold, Monte-Carlo calibrated
  double nu_tilde = 0.0;        ///< D-CUSUM threshold, Monte-Carlo calibrated
  Estimate j_cusum;
  Estimate j_dcusum;
  Estimate difference;  ///< paired J[D-CUSUM] - J[CUSUM]
  double bound = 0.0;   ///< 4 K delta
  bool pass = false;
};

/// Performance loss of D-CUSUM against CUSUM for K Brownian sensors with
/// binary messages (Lambda = Delta, exact for continuous paths). Both rules
/// are calibrated on the same pre-change paths, so their calibration errors
/// largely cancel, and compared on the same post-change paths.
inline std::vector<LossBoundPoint> verify_loss_bound(std::size_t sensors, std::span<const double> deltas,
                                                  std::span<const double> gammas, const LossBoundOptions& opt = {}) {
  const SensorModel model = SensorModel::brownian(sensors, opt.mu, opt.dt, Monitoring::bridge);
  const LadderOptions lopt{opt.fa_reps, opt.seed, opt.jobs, opt.step_budget};
  ThresholdSearchOptions search;
  search.ladder = lopt;
  const DelayOptions dopt{opt.delay_reps, opt.seed, opt.jobs};

  DetectorSpec cusum;
  FalseAlarmLadder cusum_ladder(cusum, model, lopt);
  std::vector<CalibrationRecord> cusum_rec;
  std::vector<DelayEstimate> cusum_delay;
  for (double g : gammas) {
    cusum_rec.push_back(calibrate_threshold(cusum_ladder, {g, GammaMeasure::kl_units}, search));
    cusum_delay.push_back(estimate_delay(cusum, model, cusum_rec.back(), dopt));
  }

  std::vector<LossBoundPoint> out;
  for (double delta : deltas) {
    if (!(delta > 0.0)) throw std::invalid_argument("verify_loss_bound: exit thresholds must be positive");
    DetectorSpec dc;
    dc.kind = DetectorKind::dcusum;
    dc.quantizer.sensors.assign(sensors, SensorQuantizer::binary(delta, delta));
    FalseAlarmLadder ladder(dc, model, lopt);
    for (std::size_t i = 0; i < gammas.size(); ++i) {
      LossBoundPoint p;
      p.delta = delta;
      p.gamma = gammas[i];
      p.nu_closed_form = ct_threshold_for_gamma(gammas[i]);
      p.nu = cusum_rec[i].threshold;
      const CalibrationRecord rec = calibrate_threshold(ladder, {gammas[i], GammaMeasure::kl_units}, search);
      p.nu_tilde = rec.threshold;
      const DelayEstimate jd = estimate_delay(dc, model, rec, dopt);
      p.j_cusum = cusum_delay[i].kl;
      p.j_dcusum = jd.kl;
      p.difference = paired_difference(jd.kl_samples, cusum_delay[i].kl_samples);
      p.bound = 4.0 * static_cast<double>(sensors) * delta;
      p.pass = p.difference.mean <= p.bound + 3.0 * p.difference.std_error;
      out.push_back(p);
    }
  }
  return out;
}

struct TauSweepPoint {
  std::int64_t change_time = 0;
  DelayEstimate delay;
};

/// Conditional delay E[T - tau | T > tau] for several change times; the
/// worst case is expected at tau = 0.
inline std::vector<TauSweepPoint> tau_sweep(const DetectorSpec& spec, const SensorModel& model, double threshold,
                                            std::span<const std::int64_t> taus, DelayOptions opt = {}) {
  std::vector<TauSweepPoint> out;
  for (auto tau : taus) {
    opt.change_time = tau;
    out.push_back({tau, estimate_delay(spec, model, threshold, opt)});
  }
  return out;
}

struct GridRefinement {
  double dt_coarse = 0.0;
  double dt_fine = 0.0;
  double closed_form = 0.0;
  Estimate coarse;           ///< E0[u at stop], grid-monitored CUSUM on the coarse grid
  Estimate fine;             ///< same on the fine grid
  Estimate coarse_minus_fine;  ///< paired per path
};

/// Grid bias of post-change CUSUM on a Brownian LLR: the fine path is
/// simulated once and summed `factor` steps at a time to form the coarse one.
inline GridRefinement grid_refinement(double mu, double nu, double dt_coarse, int factor, std::size_t reps,
                                      std::uint64_t seed = 1, unsigned jobs = 1) {
  if (factor < 2) throw std::invalid_argument("grid_refinement: factor must be at least 2");
  const double dt_fine = dt_coarse / factor;
  const SensorModel fine_model = SensorModel::brownian(1, mu, dt_fine, Monitoring::grid);
  struct Pair {
    double coarse = 0.0, fine = 0.0;
  };
  auto runs = parallel_map(reps, jobs, [&](std::size_t i) {
    PathStream paths(fine_model, 0, seed, replication_id(RunPurpose::diagnostic, i));
    double x[1];
    CusumState fine, coarse;
    bool fine_done = false;
    Pair p;
    double block = 0.0;
    for (std::int64_t n = 1;; ++n) {
      paths.next(x);
      block += x[0];
      if (!fine_done) {
        fine = cusum_step(fine, x[0]);
        if (fine.y >= nu) {
          p.fine = fine.u;
          fine_done = true;
        }
      }
      if (n % factor == 0) {
        coarse = cusum_step(coarse, block);
        block = 0.0;
        // The fine statistic dominates the coarse one, so the fine run has stopped.
        if (coarse.y >= nu) {
          p.coarse = coarse.u;
          return p;
        }
      }
    }
  });
  const double cf = ct_closed_forms(nu).delay;
  GridRefinement g{dt_coarse, dt_fine, cf, {}, {}, {}};
  RunningStats c, f, r;
  for (const auto& p : runs) {
    c.add(p.coarse);
    f.add(p.fine);
    r.add(p.coarse - p.fine);
  }
  g.coarse = c.estimate();
  g.fine = f.estimate();
  g.coarse_minus_fine = r.estimate();
  return g;
}

}  // namespace qcd

#endif  // QCD_SIMHARNESS_HPP
