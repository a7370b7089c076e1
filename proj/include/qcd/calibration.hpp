#ifndef QCD_CALIBRATION_HPP
#define QCD_CALIBRATION_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "qcd/detectors.hpp"
#include "qcd/model.hpp"
#include "qcd/parallel.hpp"
#include "qcd/quantizer.hpp"
#include "qcd/rng.hpp"
#include "qcd/stats.hpp"

namespace qcd {

enum class DetectorKind { centralized, qcusum, dcusum, mei, mincusum };

inline std::string detector_name(DetectorKind k) {
  switch (k) {
    case DetectorKind::centralized: return "centralized";
    case DetectorKind::qcusum: return "qcusum";
    case DetectorKind::dcusum: return "dcusum";
    case DetectorKind::mei: return "mei";
    case DetectorKind::mincusum: return "mincusum";
  }
  return "unknown";
}

inline DetectorKind parse_detector(const std::string& s) {
  for (auto k : {DetectorKind::centralized, DetectorKind::qcusum, DetectorKind::dcusum, DetectorKind::mei,
                 DetectorKind::mincusum}) {
    if (detector_name(k) == s) return k;
  }
  throw std::invalid_argument("unknown detector '" + s + "'");
}

/// A detector family with everything but its threshold fixed.
///
/// The threshold is nu (centralized), nu-hat (Q-CUSUM), nu-tilde (D-CUSUM)
/// or the proportionality constant c of c^k = c I0^k (Mei, min-CUSUM).
struct DetectorSpec {
  DetectorKind kind = DetectorKind::centralized;
  QuantizerConfig quantizer;
  QcusumConfig qcusum;

  std::string name() const { return detector_name(kind); }

  /// Natural unit of the threshold, used to size the search grid.
  double threshold_scale(const SensorModel& model) const {
    if (kind != DetectorKind::mei && kind != DetectorKind::mincusum) return 1.0;
    const auto kl = kl_numbers(model);
    return 1.0 / *std::max_element(kl.i0.begin(), kl.i0.end());
  }
};

enum class GammaMeasure { kl_units, physical_time };

struct FalseAlarmTarget {
  double gamma = 0.0;
  GammaMeasure measure = GammaMeasure::kl_units;

  void validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("FalseAlarmTarget: gamma must be positive");
  }
};

/// Replication index spaces, so false-alarm and delay runs never share paths.
enum class RunPurpose : std::uint64_t { false_alarm = 0, delay = 1, diagnostic = 2 };

inline std::uint64_t replication_id(RunPurpose p, std::uint64_t rep) {
  return (static_cast<std::uint64_t>(p) << 56) | rep;
}

/// One replication of a detector on a streamed path. Owns the path stream and
/// any bridge randomness; not movable because detectors point into it.
class DetectorRun {
 public:
  DetectorRun(const DetectorSpec& spec, const SensorModel& model, std::int64_t change_time, std::uint64_t seed,
              std::uint64_t replication, double threshold = 0.0)
      : paths_(model, change_time, seed, replication), inc_(model.sensors()) {
    const std::size_t k = model.sensors();
    const bool bridged = model.bridged();
    switch (spec.kind) {
      case DetectorKind::centralized:
        if (bridged) {
          bridges_.emplace_back(StreamId{seed, replication, kFusionLane});
          det_.emplace<CentralizedCusum>(model.pooled_step_variance(), &bridges_[0]);
        } else {
          det_.emplace<CentralizedCusum>();
        }
        break;
      case DetectorKind::qcusum:
        det_.emplace<QCusum>(spec.qcusum);
        break;
      case DetectorKind::dcusum:
        if (spec.quantizer.size() != k) throw std::invalid_argument("DetectorRun: quantizer sensor count mismatch");
        if (bridged) {
          bridges_.reserve(k);
          for (std::size_t s = 0; s < k; ++s) bridges_.emplace_back(StreamId{seed, replication, kSensorBridgeLane + s});
          det_.emplace<DCusum>(spec.quantizer, model, std::span<Substream>(bridges_));
        } else {
          det_.emplace<DCusum>(spec.quantizer);
        }
        break;
      case DetectorKind::mei:
      case DetectorKind::mincusum: {
        const auto kl = kl_numbers(model);
        det_.emplace<LocalCusumFusion>(
            spec.kind == DetectorKind::mei ? LocalFusionRule::all_sensors : LocalFusionRule::any_sensor, kl.i0,
            threshold > 0.0 ? threshold : std::numeric_limits<double>::infinity());
        break;
      }
    }
  }
  DetectorRun(const DetectorRun&) = delete;
  DetectorRun& operator=(const DetectorRun&) = delete;

  /// Advances one grid step. `watch` is the lowest statistic level of interest.
  Observation step(double watch) {
    paths_.next(inc_);
    for (double v : inc_) u_ += v;
    return std::visit([&](auto& d) { return d.step(std::span<const double>(inc_), watch); }, det_);
  }

  std::int64_t time() const { return paths_.time(); }
  double u() const { return u_; }
  std::int64_t messages() const {
    return std::visit([](const auto& d) { return d.messages(); }, det_);
  }
  std::int64_t bits() const {
    return std::visit([](const auto& d) { return d.bits(); }, det_);
  }

 private:
  PathStream paths_;
  std::vector<double> inc_;
  std::vector<Substream> bridges_;
  std::variant<CentralizedCusum, QCusum, DCusum, LocalCusumFusion> det_;
  double u_ = 0.0;
};

/// Runs one replication until the statistic reaches `threshold` or `horizon` steps.
inline StoppingResult run_detector(const DetectorSpec& spec, const SensorModel& model, double threshold,
                                   std::int64_t change_time, std::uint64_t seed, std::uint64_t replication,
                                   std::int64_t horizon) {
  DetectorRun run(spec, model, change_time, seed, replication, threshold);
  StoppingResult r;
  r.detector = spec.name();
  while (run.time() < horizon) {
    const Observation obs = run.step(threshold);
    if (obs.evaluated && obs.statistic >= threshold) {
      r.stopped = true;
      r.statistic_at_stop = obs.statistic;
      r.u_at_stop = obs.floor && std::isfinite(threshold) ? *obs.floor + threshold : run.u();
      break;
    }
  }
  r.stop_time = run.time();
  if (!r.stopped) r.u_at_stop = run.u();
  r.messages_consumed = run.messages();
  r.bits_transmitted = run.bits();
  return r;
}

/// A new running maximum of the decision statistic. For every threshold x in
/// (previous level, level] the detector stops at `time`; the pooled LLR there
/// is `u`, or `u + x` when `continuous` (u then holds the step's floor).
struct LadderRecord {
  double level = 0.0;
  std::int64_t time = 0;
  double u = 0.0;
  bool continuous = false;

  double u_at(double x) const { return continuous && std::isfinite(x) ? u + x : u; }
};

struct LadderOptions {
  std::size_t reps = 1000;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::uint64_t step_budget = 100'000'000;
};

/// Pre-change replications advanced until their running maxima pass a level.
/// Every threshold below the reached level is then evaluated from the same
/// paths (common random numbers) without re-simulation.
class FalseAlarmLadder {
 public:
  FalseAlarmLadder(DetectorSpec spec, SensorModel model, LadderOptions opt)
      : spec_(std::move(spec)), model_(std::move(model)), opt_(opt), reps_(opt.reps) {
    if (opt.reps < 2) throw std::invalid_argument("FalseAlarmLadder: need at least two replications");
    model_.validate();
  }

  /// Extends every replication until its statistic has reached `level`.
  void advance_to(double level) {
    if (started_ && level <= reached_) return;
    std::atomic<bool> over{false};
    std::vector<std::uint64_t> used(reps_.size(), 0);
    parallel_for(reps_.size(), opt_.jobs, [&](std::size_t i) {
      auto& rep = reps_[i];
      if (!rep.run) {
        rep.run = std::make_unique<DetectorRun>(spec_, model_, kNoChange, opt_.seed,
                                                replication_id(RunPurpose::false_alarm, i));
      }
      std::uint64_t n = 0;
      while (rep.records.empty() || rep.max_level() < level) {
        if (steps_ + n >= opt_.step_budget || over.load(std::memory_order_relaxed)) {
          over = true;
          break;
        }
        const Observation obs = rep.run->step(rep.max_level());
        ++n;
        if (obs.evaluated && obs.statistic > rep.max_level()) {
          const bool cont = obs.floor.has_value();
          rep.records.push_back({obs.statistic, rep.run->time(), cont ? *obs.floor : rep.run->u(), cont});
        }
      }
      used[i] = n;
    });
    for (auto n : used) steps_ += n;
    if (over || steps_ > opt_.step_budget) {
      throw CalibrationError("false-alarm simulation exceeded its budget of " + std::to_string(opt_.step_budget) +
                             " steps before reaching level " + std::to_string(level));
    }
    reached_ = started_ ? std::max(reached_, level) : level;
    started_ = true;
  }

  double reached() const { return reached_; }
  std::uint64_t steps_used() const { return steps_; }
  std::size_t reps() const { return reps_.size(); }
  const DetectorSpec& spec() const { return spec_; }
  const SensorModel& model() const { return model_; }

  /// Stopping time (steps) and pooled LLR of every replication at threshold x.
  struct Sample {
    std::vector<double> stop_steps;
    std::vector<double> u_at_stop;
  };

  Sample at(double x) {
    advance_to(x);
    Sample s;
    s.stop_steps.reserve(reps_.size());
    s.u_at_stop.reserve(reps_.size());
    for (const auto& rep : reps_) {
      auto it = std::lower_bound(rep.records.begin(), rep.records.end(), x,
                                 [](const LadderRecord& r, double v) { return r.level < v; });
      s.stop_steps.push_back(static_cast<double>(it->time));
      s.u_at_stop.push_back(it->u_at(x));
    }
    return s;
  }

 private:
  struct Replication {
    std::unique_ptr<DetectorRun> run;
    std::vector<LadderRecord> records;
    double max_level() const { return records.empty() ? -std::numeric_limits<double>::infinity() : records.back().level; }
  };

  DetectorSpec spec_;
  SensorModel model_;
  LadderOptions opt_;
  std::vector<Replication> reps_;
  double reached_ = -std::numeric_limits<double>::infinity();
  bool started_ = false;
  std::uint64_t steps_ = 0;
};

/// Pooled pre-change LLR drift per step: K Ibar_inf dt.
inline double pooled_drift_per_step(const SensorModel& model) {
  double s = 0.0;
  for (std::size_t k = 0; k < model.sensors(); ++k) s -= model.step_drift(k, false);
  return s;
}

struct FalseAlarmEstimate {
  Estimate period_steps;   ///< E_inf[T] in grid steps
  Estimate gamma_direct;   ///< E_inf[-u_T]
  Estimate gamma_wald;     ///< K Ibar_inf E_inf[T] (per unit time, times dt)
  Estimate period_physical;
};

inline FalseAlarmEstimate summarize_false_alarm(const FalseAlarmLadder::Sample& s, const SensorModel& model) {
  FalseAlarmEstimate e;
  e.period_steps = estimate_of(s.stop_steps);
  std::vector<double> minus_u(s.u_at_stop.size());
  std::transform(s.u_at_stop.begin(), s.u_at_stop.end(), minus_u.begin(), [](double u) { return -u; });
  e.gamma_direct = estimate_of(minus_u);
  const double drift = pooled_drift_per_step(model);
  e.gamma_wald = {drift * e.period_steps.mean, drift * e.period_steps.std_error, e.period_steps.n};
  e.period_physical = {model.dt * e.period_steps.mean, model.dt * e.period_steps.std_error, e.period_steps.n};
  return e;
}

struct SearchPoint {
  double threshold = 0.0;
  double achieved = 0.0;
};

/// Result of a threshold search.
///
/// Lattice-valued statistics (D-CUSUM, Q-CUSUM) make the false-alarm level a
/// step function of the threshold, so a target between two steps is met by a
/// randomized rule: with probability `mix_weight` use `threshold`, otherwise
/// `threshold_low`, the coin being tossed once at time zero. A deterministic
/// rule has mix_weight = 1 and threshold_low = threshold.
struct CalibrationRecord {
  std::string detector;
  FalseAlarmTarget target;
  double threshold = 0.0;
  double threshold_low = 0.0;
  double mix_weight = 1.0;
  Estimate achieved_gamma;       ///< direct E_inf[-u_T] (KL) or E_inf[T] dt (physical)
  Estimate achieved_gamma_wald;  ///< K Ibar_inf E_inf[T]
  Estimate fa_period_steps;
  std::size_t mc_reps = 0;
  std::uint64_t seed = 0;
  std::uint64_t steps_used = 0;
  std::vector<SearchPoint> trace;

  bool randomized() const { return mix_weight < 1.0; }
};

/// Per-replication expectation over the time-zero coin of a randomized rule.
inline FalseAlarmLadder::Sample mix_samples(const FalseAlarmLadder::Sample& hi, const FalseAlarmLadder::Sample& lo,
                                            double w) {
  FalseAlarmLadder::Sample m = hi;
  for (std::size_t i = 0; i < m.stop_steps.size(); ++i) {
    m.stop_steps[i] = w * hi.stop_steps[i] + (1.0 - w) * lo.stop_steps[i];
    m.u_at_stop[i] = w * hi.u_at_stop[i] + (1.0 - w) * lo.u_at_stop[i];
  }
  return m;
}

struct ThresholdSearchOptions {
  LadderOptions ladder;
  double tolerance = 0.02;  ///< relative, on the achieved gamma
  double grid_step = 0.5;   ///< in units of DetectorSpec::threshold_scale
};

/// Monotone search for the threshold whose estimated false-alarm level is the
/// target: an upward grid to bracket, log-linear interpolation, then bisection
/// on the (pathwise monotone) Wald estimate over the same replications.
inline CalibrationRecord calibrate_threshold(FalseAlarmLadder& ladder, const FalseAlarmTarget& target,
                                             const ThresholdSearchOptions& opt = {}) {
  target.validate();
  const SensorModel& model = ladder.model();
  CalibrationRecord rec;
  rec.detector = ladder.spec().name();
  rec.target = target;
  rec.mc_reps = ladder.reps();
  rec.seed = opt.ladder.seed;
  const double goal = target.gamma;

  auto measure = [&](const FalseAlarmEstimate& fa) {
    return target.measure == GammaMeasure::kl_units ? fa.gamma_wald.mean : fa.period_physical.mean;
  };
  auto achieved = [&](double x) {
    const double g = measure(summarize_false_alarm(ladder.at(x), model));
    rec.trace.push_back({x, g});
    return g;
  };
  auto close = [&](double g) { return g > 0.0 && std::abs(std::log(g / goal)) <= 1e-3; };

  const double step = opt.grid_step * ladder.spec().threshold_scale(model);
  const double tiny = 1e-9 * step;
  double lo = tiny, g_lo = achieved(lo);
  double hi = lo, g_hi = g_lo;
  if (g_lo >= goal) {
    // Even the smallest positive threshold alarms too often: mix with the rule
    // that stops at the first decision instant.
    lo = -std::numeric_limits<double>::infinity();
    g_lo = achieved(lo);
    if (g_lo >= goal && !close(g_lo)) {
      throw CalibrationError(rec.detector + ": gamma " + std::to_string(goal) +
                             " is below the smallest attainable level " + std::to_string(g_lo));
    }
  } else {
    hi = step;
    g_hi = achieved(hi);
    while (g_hi < goal) {
      lo = hi;
      g_lo = g_hi;
      hi += step;
      g_hi = achieved(hi);
    }
    if (g_lo > 0.0 && g_hi > g_lo && !close(g_hi)) {
      const double x = std::clamp(
          lo + (std::log(goal) - std::log(g_lo)) / (std::log(g_hi) - std::log(g_lo)) * (hi - lo), lo, hi);
      const double g = achieved(x);
      (g < goal ? lo : hi) = x;
      (g < goal ? g_lo : g_hi) = g;
    }
    for (int it = 0; it < 100 && !close(g_lo) && !close(g_hi) && hi - lo > tiny; ++it) {
      const double x = 0.5 * (lo + hi);
      const double g = achieved(x);
      (g < goal ? lo : hi) = x;
      (g < goal ? g_lo : g_hi) = g;
    }
  }

  FalseAlarmLadder::Sample sample;
  if (close(g_hi) || !(g_hi > g_lo)) {
    rec.threshold = rec.threshold_low = hi;
    sample = ladder.at(hi);
  } else if (close(g_lo)) {
    rec.threshold = rec.threshold_low = lo;
    sample = ladder.at(lo);
  } else {
    rec.threshold = hi;
    rec.threshold_low = lo;
    rec.mix_weight = (goal - g_lo) / (g_hi - g_lo);
    sample = mix_samples(ladder.at(hi), ladder.at(lo), rec.mix_weight);
  }
  const auto fa = summarize_false_alarm(sample, model);
  rec.achieved_gamma = target.measure == GammaMeasure::kl_units ? fa.gamma_direct : fa.period_physical;
  rec.achieved_gamma_wald = fa.gamma_wald;
  rec.fa_period_steps = fa.period_steps;
  rec.steps_used = ladder.steps_used();
  const double g = measure(fa);
  if (std::abs(g / goal - 1.0) > opt.tolerance) {
    throw CalibrationError(rec.detector + ": could not reach gamma " + std::to_string(goal) +
                           " within tolerance (closest " + std::to_string(g) + ")");
  }
  return rec;
}

inline CalibrationRecord calibrate_threshold(const DetectorSpec& spec, const SensorModel& model,
                                             const FalseAlarmTarget& target, const ThresholdSearchOptions& opt = {}) {
  FalseAlarmLadder ladder(spec, model, opt.ladder);
  return calibrate_threshold(ladder, target, opt);
}

/// Calibrates an increasing list of targets on one shared ladder.
inline std::vector<CalibrationRecord> calibrate_thresholds(const DetectorSpec& spec, const SensorModel& model,
                                                           std::span<const FalseAlarmTarget> targets,
                                                           const ThresholdSearchOptions& opt = {}) {
  FalseAlarmLadder ladder(spec, model, opt.ladder);
  std::vector<CalibrationRecord> out;
  for (const auto& t : targets) out.push_back(calibrate_threshold(ladder, t, opt));
  return out;
}

/// Threshold bound for D-CUSUM: nu-tilde <= log gamma - log Ibar_inf.
inline double nu_tilde_bound(double gamma, double ibar_inf) {
  if (!(ibar_inf > 0.0) || !(gamma > ibar_inf)) {
    throw std::invalid_argument("nu_tilde_bound: need gamma > Ibar_inf > 0");
  }
  return std::log(gamma) - std::log(ibar_inf);
}

struct SprtOracle {
  Estimate e0_u_at_stop;        ///< E0[u_T] / P0(u_T >= nu)
  Estimate einf_minus_u_at_stop;  ///< Einf[-u_T] / Pinf(u_T >= nu)
  double p0_upper = 0.0;
  double pinf_upper = 0.0;
};

/// CUSUM performance through its repeated-SPRT structure. A cycle starts at
/// u = 0 and ends at the first n >= 1 with u_n <= 0 or u_n >= nu; then
/// E[u at the CUSUM stop] = E[u_T] / P(u_T >= nu) under either measure.
inline SprtOracle sprt_cusum_oracle(const SensorModel& model, double nu, std::size_t reps, std::uint64_t seed = 1,
                                    unsigned jobs = 1) {
  if (!(nu > 0.0)) throw std::invalid_argument("sprt_cusum_oracle: nu must be positive");
  if (model.bridged()) throw std::invalid_argument("sprt_cusum_oracle: needs a grid-monitored random walk");
  if (reps < 2) throw std::invalid_argument("sprt_cusum_oracle: need at least two cycles");
  constexpr std::size_t chunk = 4096;
  const std::size_t chunks = (reps + chunk - 1) / chunk;
  auto side = [&](bool post, Estimate& out, double& p_upper) {
    std::vector<double> num(reps), den(reps);
    parallel_for(chunks, jobs, [&](std::size_t c) {
      Substream rng(StreamId{seed, (post ? 1ULL << 40 : 0ULL) | c, kSprtLane});
      std::vector<double> scale, drift;
      for (std::size_t k = 0; k < model.sensors(); ++k) {
        scale.push_back(model.step_scale(k));
        drift.push_back(model.step_drift(k, post));
      }
      for (std::size_t i = c * chunk; i < std::min(reps, (c + 1) * chunk); ++i) {
        double u = 0.0;
        do {
          for (std::size_t k = 0; k < scale.size(); ++k) u += scale[k] * rng.normal() + drift[k];
        } while (u > 0.0 && u < nu);
        num[i] = post ? u : -u;
        den[i] = u >= nu ? 1.0 : 0.0;
      }
    });
    double hits = 0.0;
    for (double d : den) hits += d;
    if (hits == 0.0) throw CalibrationError("sprt_cusum_oracle: no cycle reached the upper boundary");
    p_upper = hits / static_cast<double>(reps);
    out = ratio_estimate(num, den);
  };
  SprtOracle o;
  side(true, o.e0_u_at_stop, o.p0_upper);
  side(false, o.einf_minus_u_at_stop, o.pinf_upper);
  return o;
}

}  // namespace qcd

#endif  // QCD_CALIBRATION_HPP
