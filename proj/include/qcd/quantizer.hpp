#ifndef QCD_QUANTIZER_HPP
#define QCD_QUANTIZER_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qcd/model.hpp"
#include "qcd/parallel.hpp"
#include "qcd/rng.hpp"
#include "qcd/stats.hpp"

namespace qcd {

/// Raised when a Monte-Carlo calibration cannot produce a valid value.
class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One sensor's communication scheme: exit band (-delta_under, delta_bar),
/// interior overshoot levels and the log-likelihood ratio of each message.
///
/// eps_bar/eps_under hold the d-1 interior levels (eps_0 = 0 and eps_d = inf
/// are implicit); lambda_bar[j-1]/lambda_under[j-1] are the LLR magnitudes of
/// messages +j and -j.
struct SensorQuantizer {
  double delta_bar = 1.0;
  double delta_under = 1.0;
  std::vector<double> eps_bar;
  std::vector<double> eps_under;
  std::vector<double> lambda_bar{1.0};
  std::vector<double> lambda_under{1.0};

  int d() const { return static_cast<int>(lambda_bar.size()); }

  /// Lower edge of positive cell j (1-based): delta_bar + eps_{j-1}.
  double upper_cell_edge(int j) const {
    return delta_bar + (j == 1 ? 0.0 : eps_bar[static_cast<std::size_t>(j - 2)]);
  }
  double lower_cell_edge(int j) const {
    return delta_under + (j == 1 ? 0.0 : eps_under[static_cast<std::size_t>(j - 2)]);
  }

  /// Checks the structural invariants. Message LLRs exceeding their cell
  /// edges is a property of calibrated values and is checked separately.
  void validate() const {
    if (!(delta_bar > 0.0) || !(delta_under > 0.0)) {
      throw std::invalid_argument("SensorQuantizer: exit thresholds must be positive");
    }
    const auto dd = lambda_bar.size();
    if (dd == 0 || lambda_under.size() != dd || eps_bar.size() + 1 != dd || eps_under.size() + 1 != dd) {
      throw std::invalid_argument("SensorQuantizer: inconsistent alphabet sizes");
    }
    auto strictly_increasing_positive = [](const std::vector<double>& v) {
      double prev = 0.0;
      for (double x : v) {
        if (!(x > prev)) return false;
        prev = x;
      }
      return true;
    };
    if (!strictly_increasing_positive(eps_bar) || !strictly_increasing_positive(eps_under)) {
      throw std::invalid_argument("SensorQuantizer: overshoot levels must be positive and strictly increasing");
    }
    if (!std::is_sorted(lambda_bar.begin(), lambda_bar.end()) ||
        !std::is_sorted(lambda_under.begin(), lambda_under.end())) {
      throw std::invalid_argument("SensorQuantizer: message LLRs must increase with the level");
    }
  }

  /// Binary scheme whose message LLRs are the thresholds themselves; exact for
  /// continuous paths, where exits land on the boundary.
  static SensorQuantizer binary(double delta_bar, double delta_under) {
    SensorQuantizer q{delta_bar, delta_under, {}, {}, {delta_bar}, {delta_under}};
    q.validate();
    return q;
  }
};

struct QuantizerConfig {
  std::vector<SensorQuantizer> sensors;

  std::size_t size() const { return sensors.size(); }
  const SensorQuantizer& operator[](std::size_t k) const { return sensors.at(k); }
  double max_lambda() const {
    double m = 0.0;
    for (const auto& q : sensors) {
      m = std::max({m, q.lambda_bar.back(), q.lambda_under.back()});
    }
    return m;
  }
  double max_delta() const {
    double m = 0.0;
    for (const auto& q : sensors) m = std::max({m, q.delta_bar, q.delta_under});
    return m;
  }
};

struct Message {
  std::size_t sensor = 0;
  std::int64_t time = 0;
  int level = 0;

  friend bool operator==(const Message&, const Message&) = default;
};

struct ExitSample {
  std::int64_t duration = 0;
  double ell = 0.0;
};

/// Bits needed for a message from an alphabet of 2d symbols.
inline int bits_per_message(int d) {
  if (d < 1) throw std::invalid_argument("bits_per_message: d must be positive");
  int ceil_log2 = 0;
  while ((1 << ceil_log2) < d) ++ceil_log2;
  return 1 + ceil_log2;
}

/// Signed level of an exit value: +j when ell - delta_bar lies in
/// [eps_{j-1}, eps_j), -j when -(ell + delta_under) does.
inline int quantize_overshoot(double ell, const SensorQuantizer& q) {
  if (ell >= q.delta_bar) {
    const double over = ell - q.delta_bar;
    const auto j = std::upper_bound(q.eps_bar.begin(), q.eps_bar.end(), over) - q.eps_bar.begin();
    return static_cast<int>(j) + 1;
  }
  if (ell <= -q.delta_under) {
    const double over = -(ell + q.delta_under);
    const auto j = std::upper_bound(q.eps_under.begin(), q.eps_under.end(), over) - q.eps_under.begin();
    return -(static_cast<int>(j) + 1);
  }
  throw std::invalid_argument("quantize_overshoot: value inside the continuation band");
}

inline double message_llr(int z, const SensorQuantizer& q) {
  if (z == 0 || std::abs(z) > q.d()) throw std::invalid_argument("message_llr: level out of range");
  return z > 0 ? q.lambda_bar[static_cast<std::size_t>(z - 1)]
               : -q.lambda_under[static_cast<std::size_t>(-z - 1)];
}

/// Sensor-side state machine: accumulates the local LLR since the previous
/// message and emits a quantized level at every two-sided exit.
///
/// With a bridge stream the path between grid points is treated as a
/// Brownian bridge: an exit inside a step is detected with its exact
/// probability, the exit value is the boundary itself and the part of the
/// step after the exit is carried into the next accumulation.
class SensorEncoder {
 public:
  explicit SensorEncoder(const SensorQuantizer& q, double step_variance = 0.0, Substream* bridge = nullptr)
      : q_(&q), var_(step_variance), bridge_(bridge) {}

  /// Consumes one increment; returns the emitted level or 0.
  int step(double increment) {
    const double a = acc_;
    const double b = acc_ + increment;
    if (bridge_ == nullptr) {
      acc_ = b;
      if (b >= q_->delta_bar || b <= -q_->delta_under) return emit(b, 0.0);
      return 0;
    }
    const double hi = q_->delta_bar, lo = -q_->delta_under;
    if (b >= hi) return emit(hi, b - hi);
    if (b <= lo) return emit(lo, b - lo);
    const double pu = bridge::exceed_probability(a, b, hi, var_);
    if (pu > bridge::kNegligible && bridge_->uniform_open() <= pu) return emit(hi, b - hi);
    const double pl = bridge::undershoot_probability(a, b, lo, var_);
    if (pl > bridge::kNegligible && bridge_->uniform_open() <= pl) return emit(lo, b - lo);
    acc_ = b;
    return 0;
  }

  double accumulated() const { return acc_; }
  double last_exit_value() const { return last_ell_; }

 private:
  int emit(double ell, double carry) {
    last_ell_ = ell;
    acc_ = carry;
    return quantize_overshoot(ell, *q_);
  }

  const SensorQuantizer* q_;
  double var_;
  Substream* bridge_;
  double acc_ = 0.0;
  double last_ell_ = 0.0;
};

/// Messages produced by sensor k over a finite increment stream (grid monitoring).
inline std::vector<Message> run_sensor(std::span<const double> increments, const SensorQuantizer& q,
                                       std::size_t k) {
  SensorEncoder enc(q);
  std::vector<Message> out;
  for (std::size_t t = 0; t < increments.size(); ++t) {
    if (const int z = enc.step(increments[t]); z != 0) {
      out.push_back({k, static_cast<std::int64_t>(t + 1), z});
    }
  }
  return out;
}

/// One fresh two-sided exit of sensor k's LLR from (-delta_under, delta_bar).
inline ExitSample simulate_exit(const SensorModel& model, std::size_t k, double delta_bar, double delta_under,
                                bool post_change, Substream& rng) {
  const double scale = model.step_scale(k);
  const double drift = model.step_drift(k, post_change);
  ExitSample s;
  if (!model.bridged()) {
    double ell = 0.0;
    do {
      ell += scale * rng.normal() + drift;
      ++s.duration;
    } while (ell < delta_bar && ell > -delta_under);
    s.ell = ell;
    return s;
  }
  const double var = model.step_variance(k);
  double a = 0.0;
  for (;;) {
    const double b = a + scale * rng.normal() + drift;
    ++s.duration;
    if (b >= delta_bar || (bridge::exceed_probability(a, b, delta_bar, var) > bridge::kNegligible &&
                           rng.uniform_open() <= bridge::exceed_probability(a, b, delta_bar, var))) {
      s.ell = delta_bar;
      return s;
    }
    if (b <= -delta_under ||
        (bridge::undershoot_probability(a, b, -delta_under, var) > bridge::kNegligible &&
         rng.uniform_open() <= bridge::undershoot_probability(a, b, -delta_under, var))) {
      s.ell = -delta_under;
      return s;
    }
    a = b;
  }
}

enum class Regime { pre_change, post_change };

/// Monte-Carlo controls shared by the quantizer calibrations. Exit samples
/// are drawn in fixed-size chunks, each from its own substream, so results
/// do not depend on `jobs`.
struct ExitSimOptions {
  std::size_t reps = 1'000'000;
  std::uint64_t seed = 1;
  unsigned jobs = 1;
  std::size_t chunk = 4096;
};

inline constexpr std::size_t kMinConditionalSamples = 1000;

/// Runs `reps` exits of sensor k under `regime` and hands each to visit(chunk_state, sample).
/// State is created per chunk by make_state() and the per-chunk states are returned in order.
template <class State, class MakeState, class Visit>
std::vector<State> for_each_exit(const SensorModel& model, std::size_t k, double delta_bar, double delta_under,
                                 Regime regime, const ExitSimOptions& opt, MakeState&& make_state, Visit&& visit) {
  const std::size_t chunks = (opt.reps + opt.chunk - 1) / opt.chunk;
  const bool post = regime == Regime::post_change;
  const std::uint64_t lane = post ? kExitPostLane : kExitPreLane;
  return parallel_map(chunks, opt.jobs, [&](std::size_t c) {
    State state = make_state();
    Substream rng(StreamId{opt.seed, (static_cast<std::uint64_t>(k) << 40) | c, lane});
    const std::size_t begin = c * opt.chunk;
    const std::size_t end = std::min(opt.reps, begin + opt.chunk);
    for (std::size_t i = begin; i < end; ++i) {
      visit(state, simulate_exit(model, k, delta_bar, delta_under, post, rng));
    }
    return state;
  });
}

/// Mean exit duration and its standard error.
inline Estimate mean_exit_time(const SensorModel& model, std::size_t k, double delta_bar, double delta_under,
                               Regime regime, const ExitSimOptions& opt) {
  auto parts = for_each_exit<RunningStats>(
      model, k, delta_bar, delta_under, regime, opt, [] { return RunningStats{}; },
      [](RunningStats& s, const ExitSample& e) { s.add(static_cast<double>(e.duration)); });
  // Fixed-order pooled mean/variance over chunks.
  double n = 0.0, sum = 0.0, sumsq = 0.0;
  for (const auto& p : parts) {
    const double m = static_cast<double>(p.count());
    n += m;
    sum += p.mean() * m;
    sumsq += p.variance() * (m - 1.0) + p.mean() * p.mean() * m;
  }
  const double mean = sum / n;
  const double var = (sumsq - n * mean * mean) / (n - 1.0);
  return {mean, std::sqrt(std::max(var, 0.0) / n), static_cast<std::size_t>(n)};
}

struct DeltaPair {
  double delta_bar = 0.0;
  double delta_under = 0.0;
  Estimate achieved_period;
};

struct DeltaSearchOptions {
  ExitSimOptions sim;
  double tolerance = 5e-3;
  double lower = 1e-3;
  double upper = 50.0;
};

/// Symmetric exit threshold whose mean exit time under `regime` equals `period`.
/// Bisection on delta with the same substreams at every evaluation.
inline DeltaPair calibrate_delta(const SensorModel& model, std::size_t k, double period, Regime regime,
                                 const DeltaSearchOptions& opt = {}) {
  if (!(period > 1.0)) throw std::invalid_argument("calibrate_delta: target period must exceed 1");
  auto f = [&](double delta) { return mean_exit_time(model, k, delta, delta, regime, opt.sim).mean - period; };
  double lo = opt.lower;
  if (f(lo) >= 0.0) throw CalibrationError("calibrate_delta: root not bracketed at lower end");
  // Expand from a unit bracket rather than evaluating the costly upper end first.
  double hi = std::min(1.0, opt.upper);
  while (f(hi) < 0.0) {
    if (hi >= opt.upper) throw CalibrationError("calibrate_delta: root not bracketed below upper limit");
    lo = hi;
    hi = std::min(2.0 * hi, opt.upper);
  }
  while (hi - lo > opt.tolerance) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  const double delta = 0.5 * (lo + hi);
  return {delta, delta, mean_exit_time(model, k, delta, delta, regime, opt.sim)};
}

/// Exit thresholds of a Brownian sensor from targets on the mean message
/// LLRs, s(delta_under, delta_bar) = e0 and s(delta_bar, delta_under) = einf.
/// Newton iteration on the log-thresholds.
inline DeltaPair solve_ct_deltas(double e0, double einf) {
  if (!(e0 > 0.0) || !(einf > 0.0)) throw std::invalid_argument("solve_ct_deltas: targets must be positive");
  // s(d, d) = d tanh(d/2) gives a symmetric starting point.
  double lb = std::log(std::max(std::sqrt(2.0 * std::max(e0, einf)), std::max(e0, einf)));
  double lu = lb;
  auto residual = [&](double a, double b) {
    const double db = std::exp(a), du = std::exp(b);
    return std::pair{s_function(du, db) - e0, s_function(db, du) - einf};
  };
  for (int it = 0; it < 100; ++it) {
    const auto [f1, f2] = residual(lb, lu);
    if (std::abs(f1) < 1e-13 * e0 && std::abs(f2) < 1e-13 * einf) break;
    const double h = 1e-7;
    const auto [a1, a2] = residual(lb + h, lu);
    const auto [b1, b2] = residual(lb, lu + h);
    const double j11 = (a1 - f1) / h, j21 = (a2 - f2) / h, j12 = (b1 - f1) / h, j22 = (b2 - f2) / h;
    const double det = j11 * j22 - j12 * j21;
    if (det == 0.0 || !std::isfinite(det)) throw CalibrationError("solve_ct_deltas: singular Jacobian");
    double sb = (f1 * j22 - f2 * j12) / det, su = (j11 * f2 - j21 * f1) / det;
    const double cap = std::max(std::abs(sb), std::abs(su));
    if (cap > 1.0) {
      sb /= cap;
      su /= cap;
    }
    lb -= sb;
    lu -= su;
  }
  const auto [f1, f2] = residual(lb, lu);
  if (std::abs(f1) > 1e-9 * e0 || std::abs(f2) > 1e-9 * einf) {
    throw CalibrationError("solve_ct_deltas: no solution for the requested targets");
  }
  return {std::exp(lb), std::exp(lu), {}};
}

struct OvershootLevels {
  std::vector<double> eps_bar;
  std::vector<double> eps_under;
};

/// Equal-mass overshoot levels: eps_j is the lower empirical (j/d)-quantile of
/// the overshoot beyond delta_bar given an upper exit under P0 (resp. of
/// -(ell + delta_under) given a lower exit under Pinf).
inline OvershootLevels calibrate_levels(const SensorModel& model, std::size_t k, double delta_bar,
                                        double delta_under, int d, const ExitSimOptions& opt) {
  if (d < 1) throw std::invalid_argument("calibrate_levels: d must be positive");
  if (d == 1) return {};
  using Samples = std::vector<double>;
  auto collect = [&](Regime regime) {
    const bool post = regime == Regime::post_change;
    auto parts = for_each_exit<Samples>(
        model, k, delta_bar, delta_under, regime, opt, [] { return Samples{}; },
        [&](Samples& s, const ExitSample& e) {
          if (post && e.ell >= delta_bar) s.push_back(e.ell - delta_bar);
          if (!post && e.ell <= -delta_under) s.push_back(-(e.ell + delta_under));
        });
    Samples all;
    for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
    if (all.size() < kMinConditionalSamples) {
      throw CalibrationError("calibrate_levels: fewer than 1000 conditional exit samples");
    }
    std::sort(all.begin(), all.end());
    std::vector<double> eps;
    for (int j = 1; j < d; ++j) eps.push_back(lower_quantile(all, static_cast<double>(j) / d));
    double prev = 0.0;
    for (double e : eps) {
      if (!(e > prev)) throw CalibrationError("calibrate_levels: degenerate overshoot distribution");
      prev = e;
    }
    return eps;
  };
  return {collect(Regime::post_change), collect(Regime::pre_change)};
}

struct MessageLlrs {
  std::vector<double> lambda_bar;
  std::vector<double> lambda_under;
  std::vector<Estimate> lambda_bar_est;
  std::vector<Estimate> lambda_under_est;
};

/// Message LLRs through the overshoot identities
///   lambda_bar_j   = Dbar_j - log E0[exp(-(ell - Dbar_j)) | z = j]
///   lambda_under_j = Dund_j - log Einf[exp(ell + Dund_j) | z = -j]
/// using exits under P0 for positive messages and Pinf for negative ones.
inline MessageLlrs calibrate_llr(const SensorModel& model, std::size_t k, double delta_bar, double delta_under,
                                 const OvershootLevels& levels, const ExitSimOptions& opt) {
  const int d = static_cast<int>(levels.eps_bar.size()) + 1;
  if (static_cast<int>(levels.eps_under.size()) + 1 != d) {
    throw std::invalid_argument("calibrate_llr: inconsistent level lists");
  }
  SensorQuantizer shape{delta_bar, delta_under, levels.eps_bar, levels.eps_under,
                        std::vector<double>(static_cast<std::size_t>(d), 0.0),
                        std::vector<double>(static_cast<std::size_t>(d), 0.0)};
  using Cells = std::vector<RunningStats>;
  auto tilt = [&](Regime regime) {
    const bool post = regime == Regime::post_change;
    auto parts = for_each_exit<Cells>(
        model, k, delta_bar, delta_under, regime, opt, [d] { return Cells(static_cast<std::size_t>(d)); },
        [&](Cells& cells, const ExitSample& e) {
          const int z = quantize_overshoot(e.ell, shape);
          if (post && z > 0) {
            cells[static_cast<std::size_t>(z - 1)].add(std::exp(-(e.ell - shape.upper_cell_edge(z))));
          } else if (!post && z < 0) {
            cells[static_cast<std::size_t>(-z - 1)].add(std::exp(e.ell + shape.lower_cell_edge(-z)));
          }
        });
    std::vector<Estimate> out;
    for (int j = 1; j <= d; ++j) {
      double n = 0.0, sum = 0.0, sumsq = 0.0;
      for (const auto& p : parts) {
        const auto& c = p[static_cast<std::size_t>(j - 1)];
        const double m = static_cast<double>(c.count());
        if (m == 0.0) continue;
        n += m;
        sum += c.mean() * m;
        sumsq += c.variance() * (m - 1.0) + c.mean() * c.mean() * m;
      }
      if (n < static_cast<double>(kMinConditionalSamples)) {
        throw CalibrationError("calibrate_llr: insufficient conditional samples for level " + std::to_string(j));
      }
      const double mean = sum / n;
      const double var = std::max((sumsq - n * mean * mean) / (n - 1.0), 0.0);
      const double edge = post ? shape.upper_cell_edge(j) : shape.lower_cell_edge(j);
      out.push_back({edge - std::log(mean), std::sqrt(var / n) / mean, static_cast<std::size_t>(n)});
    }
    return out;
  };
  MessageLlrs res;
  res.lambda_bar_est = tilt(Regime::post_change);
  res.lambda_under_est = tilt(Regime::pre_change);
  for (const auto& e : res.lambda_bar_est) res.lambda_bar.push_back(e.mean);
  for (const auto& e : res.lambda_under_est) res.lambda_under.push_back(e.mean);
  return res;
}

/// Direct estimate of log P0(z1 = z) / Pinf(z1 = z) from cell frequencies.
/// Needs many exits when the band is wide; used as a verification route.
inline Estimate direct_message_llr(const SensorModel& model, std::size_t k, const SensorQuantizer& q, int z,
                                   const ExitSimOptions& opt) {
  auto freq = [&](Regime regime) {
    auto parts = for_each_exit<std::size_t>(
        model, k, q.delta_bar, q.delta_under, regime, opt, [] { return std::size_t{0}; },
        [&](std::size_t& hits, const ExitSample& e) { hits += quantize_overshoot(e.ell, q) == z ? 1 : 0; });
    std::size_t hits = 0;
    for (auto h : parts) hits += h;
    return static_cast<double>(hits);
  };
  const double n = static_cast<double>(opt.reps);
  const double h0 = freq(Regime::post_change), hinf = freq(Regime::pre_change);
  if (h0 == 0.0 || hinf == 0.0) throw CalibrationError("direct_message_llr: empty cell");
  const double p0 = h0 / n, pinf = hinf / n;
  const double se = std::sqrt((1.0 - p0) / h0 + (1.0 - pinf) / hinf);
  return {std::log(p0 / pinf), se, opt.reps};
}

struct SensorCalibration {
  SensorQuantizer quantizer;
  Estimate achieved_period;
  MessageLlrs llrs;
};

/// Full sensor pipeline: exit band for the target period, equal-mass levels,
/// then message LLRs. Symmetric band, calibrated under the post-change law.
inline SensorCalibration calibrate_sensor(const SensorModel& model, std::size_t k, double period, int d,
                                          const DeltaSearchOptions& delta_opt, const ExitSimOptions& mc) {
  const DeltaPair deltas = calibrate_delta(model, k, period, Regime::post_change, delta_opt);
  const OvershootLevels levels = calibrate_levels(model, k, deltas.delta_bar, deltas.delta_under, d, mc);
  MessageLlrs llrs = calibrate_llr(model, k, deltas.delta_bar, deltas.delta_under, levels, mc);
  SensorQuantizer q{deltas.delta_bar, deltas.delta_under, levels.eps_bar, levels.eps_under, llrs.lambda_bar,
                    llrs.lambda_under};
  q.validate();
  return {q, deltas.achieved_period, std::move(llrs)};
}

/// Calibrates every sensor; sensors sharing a post-change mean share one calibration.
inline std::vector<SensorCalibration> calibrate_quantizer(const SensorModel& model, double period, int d,
                                                          const DeltaSearchOptions& delta_opt,
                                                          const ExitSimOptions& mc) {
  std::vector<SensorCalibration> out;
  for (std::size_t k = 0; k < model.sensors(); ++k) {
    auto same = std::find_if(model.mus.begin(), model.mus.begin() + static_cast<std::ptrdiff_t>(k),
                             [&](double mu) { return mu == model.mus[k]; });
    if (same != model.mus.begin() + static_cast<std::ptrdiff_t>(k)) {
      out.push_back(out[static_cast<std::size_t>(same - model.mus.begin())]);
    } else {
      out.push_back(calibrate_sensor(model, k, period, d, delta_opt, mc));
    }
  }
  return out;
}

inline QuantizerConfig to_config(const std::vector<SensorCalibration>& cal) {
  QuantizerConfig cfg;
  for (const auto& c : cal) cfg.sensors.push_back(c.quantizer);
  return cfg;
}

}  // namespace qcd

#endif  // QCD_QUANTIZER_HPP
