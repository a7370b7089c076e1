#ifndef QCD_DETECTORS_HPP
#define QCD_DETECTORS_HPP

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

#include "qcd/model.hpp"
#include "qcd/quantizer.hpp"
#include "qcd/rng.hpp"
#include "qcd/stats.hpp"

namespace qcd {

/// CUSUM statistic driven by the (y)+ recursion, with the running LLR sum
/// and its minimum kept alongside so y = u - min_{s<n} u_s can be checked.
struct CusumState {
  double y = 0.0;
  double u = 0.0;
  double min_u = 0.0;
  std::optional<std::int64_t> stopped_at;
};

inline CusumState cusum_step(CusumState s, double increment) {
  if (s.stopped_at) throw std::logic_error("cusum_step: detector already stopped");
  s.y = std::max(s.y, 0.0) + increment;
  s.u += increment;
  s.min_u = std::min(s.min_u, s.u);
  return s;
}

struct StoppingResult {
  std::string detector;
  bool stopped = false;
  std::int64_t stop_time = 0;  ///< grid index of the alarm, or the horizon if not stopped
  double statistic_at_stop = 0.0;
  double u_at_stop = 0.0;  ///< true pooled LLR at the alarm
  std::int64_t messages_consumed = 0;
  std::int64_t bits_transmitted = 0;
};

/// What a detector reports after consuming one step.
///
/// `statistic` is the largest value the decision statistic reached during the
/// step (the end value for grid-monitored detectors). When `floor` is set the
/// statistic moves continuously inside the step, and the pooled LLR at the
/// instant it first reaches a level x is floor + x.
struct Observation {
  bool evaluated = false;
  double statistic = 0.0;
  std::optional<double> floor;
};

/// Centralized CUSUM on the pooled LLR (sum over sensors).
class CentralizedCusum {
 public:
  CentralizedCusum() = default;
  /// Continuous monitoring with Brownian-bridge sampling of the running
  /// minimum and of within-step maxima.
  CentralizedCusum(double pooled_step_variance, Substream* bridge) : var_(pooled_step_variance), bridge_(bridge) {}

  static constexpr const char* name() { return "centralized"; }

  Observation step(std::span<const double> increments, double watch_level = 0.0) {
    double x = 0.0;
    for (double v : increments) x += v;
    if (bridge_ == nullptr) {
      s_ = cusum_step(s_, x);
      return {true, s_.y, std::nullopt};
    }
    const double a = s_.u, b = s_.u + x, m = s_.min_u;
    double new_min = std::min(m, b);
    if (bridge::undershoot_probability(a, b, m, var_) > bridge::kNegligible) {
      new_min = std::min(new_min, bridge::sample_min(a, b, var_, bridge_->uniform_open()));
    }
    double peak = b - new_min, floor = new_min;
    const double level = m + std::max(watch_level, a - m);
    if (bridge::exceed_probability(a, b, level, var_) > bridge::kNegligible) {
      const double top = bridge::sample_max(a, b, var_, bridge_->uniform_open()) - m;
      if (top > peak) {
        peak = top;
        floor = m;
      }
    }
    s_.u = b;
    s_.min_u = new_min;
    s_.y = b - new_min;
    return {true, peak, floor};
  }

  const CusumState& state() const { return s_; }
  std::int64_t messages() const { return 0; }
  std::int64_t bits() const { return 0; }

 private:
  CusumState s_;
  double var_ = 0.0;
  Substream* bridge_ = nullptr;
};

/// Q-CUSUM configuration: every `period` steps each sensor quantizes its
/// block LLR into one of `alphabet` cells (cell j is [Gamma_{j-1}, Gamma_j)).
struct QcusumSensor {
  std::vector<double> gammas;      ///< alphabet-1 interior thresholds
  std::vector<double> block_llrs;  ///< log P0(z=j)/Pinf(z=j), j = 1..alphabet
  std::vector<double> p0_mass;     ///< P0(z=j), for the information number
};

struct QcusumConfig {
  int period = 1;
  int alphabet = 2;
  std::vector<QcusumSensor> sensors;
  double nu_hat = 0.0;

  void validate() const {
    if (period < 1) throw std::invalid_argument("QcusumConfig: period must be positive");
    if (alphabet < 2) throw std::invalid_argument("QcusumConfig: alphabet must be at least 2");
    for (const auto& s : sensors) {
      if (s.gammas.size() + 1 != static_cast<std::size_t>(alphabet) ||
          s.block_llrs.size() != static_cast<std::size_t>(alphabet)) {
        throw std::invalid_argument("QcusumConfig: inconsistent sizes");
      }
      for (std::size_t j = 1; j < s.gammas.size(); ++j) {
        if (!(s.gammas[j] > s.gammas[j - 1])) throw std::invalid_argument("QcusumConfig: thresholds must increase");
      }
      for (double l : s.block_llrs) {
        if (!std::isfinite(l)) throw std::invalid_argument("QcusumConfig: block LLRs must be finite");
      }
    }
  }

  /// 1-based cell of a block LLR value.
  static int cell(const QcusumSensor& s, double block) {
    return static_cast<int>(std::upper_bound(s.gammas.begin(), s.gammas.end(), block) - s.gammas.begin()) + 1;
  }
};

/// Average per-block KL information of the quantized messages (I-hat_0).
inline double qcusum_information(const QcusumConfig& cfg) {
  double total = 0.0;
  for (const auto& s : cfg.sensors) {
    for (std::size_t j = 0; j < s.block_llrs.size(); ++j) total += s.p0_mass[j] * s.block_llrs[j];
  }
  return total / static_cast<double>(cfg.sensors.size());
}

struct QcusumCalibrationOptions {
  std::size_t reps = 1'000'000;
  std::uint64_t seed = 1;
  /// User-supplied thresholds per sensor; empty means equal P0 mass cells.
  std::vector<std::vector<double>> gammas;
};

/// Thresholds and block LLRs from simulated r-step blocks under P0 and Pinf.
inline QcusumConfig calibrate_qcusum(const SensorModel& model, int period, int alphabet,
                                     const QcusumCalibrationOptions& opt = {}) {
  QcusumConfig cfg{period, alphabet, {}, 0.0};
  if (period < 1 || alphabet < 2) throw std::invalid_argument("calibrate_qcusum: bad period or alphabet");
  for (std::size_t k = 0; k < model.sensors(); ++k) {
    auto blocks = [&](bool post) {
      Substream rng(StreamId{opt.seed, k, post ? kBlockPostLane : kBlockPreLane});
      std::vector<double> v(opt.reps);
      const double scale = model.step_scale(k), drift = model.step_drift(k, post);
      for (auto& b : v) {
        double s = 0.0;
        for (int i = 0; i < period; ++i) s += scale * rng.normal() + drift;
        b = s;
      }
      return v;
    };
    std::vector<double> post = blocks(true), pre = blocks(false);
    QcusumSensor s;
    if (k < opt.gammas.size() && !opt.gammas[k].empty()) {
      s.gammas = opt.gammas[k];
    } else {
      std::vector<double> sorted = post;
      std::sort(sorted.begin(), sorted.end());
      for (int j = 1; j < alphabet; ++j) s.gammas.push_back(lower_quantile(sorted, static_cast<double>(j) / alphabet));
    }
    std::vector<double> c0(static_cast<std::size_t>(alphabet)), cinf(static_cast<std::size_t>(alphabet));
    for (double b : post) c0[static_cast<std::size_t>(QcusumConfig::cell(s, b) - 1)] += 1.0;
    for (double b : pre) cinf[static_cast<std::size_t>(QcusumConfig::cell(s, b) - 1)] += 1.0;
    for (int j = 0; j < alphabet; ++j) {
      if (c0[static_cast<std::size_t>(j)] == 0.0 || cinf[static_cast<std::size_t>(j)] == 0.0) {
        throw CalibrationError("calibrate_qcusum: empty quantization cell");
      }
      const double p0 = c0[static_cast<std::size_t>(j)] / static_cast<double>(opt.reps);
      const double pinf = cinf[static_cast<std::size_t>(j)] / static_cast<double>(opt.reps);
      s.p0_mass.push_back(p0);
      s.block_llrs.push_back(std::log(p0 / pinf));
    }
    cfg.sensors.push_back(std::move(s));
  }
  cfg.validate();
  return cfg;
}

/// Q-CUSUM: fusion CUSUM on quantized r-step blocks, decisions every r steps.
class QCusum {
 public:
  explicit QCusum(const QcusumConfig& cfg) : cfg_(&cfg), block_(cfg.sensors.size(), 0.0) {}

  static constexpr const char* name() { return "qcusum"; }

  Observation step(std::span<const double> increments, double = 0.0) {
    for (std::size_t k = 0; k < block_.size(); ++k) block_[k] += increments[k];
    if (++phase_ < cfg_->period) return {};
    phase_ = 0;
    double w = 0.0;
    for (std::size_t k = 0; k < block_.size(); ++k) {
      const auto& s = cfg_->sensors[k];
      w += s.block_llrs[static_cast<std::size_t>(QcusumConfig::cell(s, block_[k]) - 1)];
      block_[k] = 0.0;
    }
    y_ = std::max(y_, 0.0) + w;
    messages_ += static_cast<std::int64_t>(block_.size());
    return {true, y_, std::nullopt};
  }

  double statistic() const { return y_; }
  std::int64_t messages() const { return messages_; }
  std::int64_t bits() const {
    int b = 0;
    while ((1 << b) < cfg_->alphabet) ++b;
    return messages_ * b;
  }

 private:
  const QcusumConfig* cfg_;
  std::vector<double> block_;
  int phase_ = 0;
  double y_ = 0.0;
  std::int64_t messages_ = 0;
};

/// Fusion center of D-CUSUM. All messages of one instant are folded into one
/// update, y <- (y)+ + sum of their LLRs, summed in ascending sensor order.
class FusionCenter {
 public:
  explicit FusionCenter(const QuantizerConfig& cfg) : cfg_(&cfg) {}

  /// Applies one instant's messages (any order); returns the new statistic.
  double consume(std::span<const Message> simultaneous) {
    if (simultaneous.empty()) return y_;
    scratch_.assign(simultaneous.begin(), simultaneous.end());
    std::sort(scratch_.begin(), scratch_.end(),
              [](const Message& a, const Message& b) { return a.sensor < b.sensor; });
    double w = 0.0;
    for (const auto& m : scratch_) {
      const auto& q = (*cfg_)[m.sensor];
      w += message_llr(m.level, q);
      u_tilde_ += message_llr(m.level, q);
      bits_ += bits_per_message(q.d());
    }
    messages_ += static_cast<std::int64_t>(scratch_.size());
    y_ = std::max(y_, 0.0) + w;
    return y_;
  }

  double statistic() const { return y_; }
  double u_tilde() const { return u_tilde_; }
  std::int64_t messages() const { return messages_; }
  std::int64_t bits() const { return bits_; }

 private:
  const QuantizerConfig* cfg_;
  std::vector<Message> scratch_;
  double y_ = 0.0;
  double u_tilde_ = 0.0;
  std::int64_t messages_ = 0;
  std::int64_t bits_ = 0;
};

/// D-CUSUM over raw increments: sensor encoders feeding a fusion center.
class DCusum {
 public:
  explicit DCusum(const QuantizerConfig& cfg) : fusion_(cfg) {
    for (const auto& q : cfg.sensors) encoders_.emplace_back(q);
  }
  /// Bridge-monitored sensors; `bridges[k]` supplies sensor k's bridge draws.
  DCusum(const QuantizerConfig& cfg, const SensorModel& model, std::span<Substream> bridges) : fusion_(cfg) {
    for (std::size_t k = 0; k < cfg.size(); ++k) {
      encoders_.emplace_back(cfg[k], model.step_variance(k), &bridges[k]);
    }
  }

  static constexpr const char* name() { return "dcusum"; }

  Observation step(std::span<const double> increments, double = 0.0) {
    ++t_;
    pending_.clear();
    for (std::size_t k = 0; k < encoders_.size(); ++k) {
      if (const int z = encoders_[k].step(increments[k]); z != 0) pending_.push_back({k, t_, z});
    }
    if (pending_.empty()) return {};
    return {true, fusion_.consume(pending_), std::nullopt};
  }

  double statistic() const { return fusion_.statistic(); }
  double u_tilde() const { return fusion_.u_tilde(); }
  std::int64_t messages() const { return fusion_.messages(); }
  std::int64_t bits() const { return fusion_.bits(); }
  std::span<const Message> last_messages() const { return pending_; }

 private:
  std::vector<SensorEncoder> encoders_;
  FusionCenter fusion_;
  std::vector<Message> pending_;
  std::int64_t t_ = 0;
};

/// Per-sensor CUSUM thresholds c^k.
struct LocalCusumBank {
  std::vector<double> thresholds;

  void validate(std::size_t sensors) const {
    if (thresholds.size() != sensors) throw std::invalid_argument("LocalCusumBank: one threshold per sensor");
    for (double c : thresholds) {
      if (!(c > 0.0)) throw std::invalid_argument("LocalCusumBank: thresholds must be positive");
    }
  }
};

enum class LocalFusionRule { all_sensors, any_sensor };

/// Local CUSUMs fused by Mei's rule (all above threshold at once) or
/// min-CUSUM (any above threshold). The scalar statistic is
/// min_k y^k / w^k (resp. max_k), so the rule fires when it reaches 1 for
/// weights w^k = c^k, or reaches c for weights I0^k and thresholds c I0^k.
class LocalCusumFusion {
 public:
  LocalCusumFusion(LocalFusionRule rule, std::vector<double> weights, double message_scale = 1.0)
      : rule_(rule), w_(std::move(weights)), y_(w_.size(), 0.0), message_scale_(message_scale) {}

  static constexpr const char* name() { return "local"; }

  Observation step(std::span<const double> increments, double = 0.0) {
    double stat = rule_ == LocalFusionRule::all_sensors ? std::numeric_limits<double>::infinity()
                                                        : -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < y_.size(); ++k) {
      y_[k] = std::max(y_[k], 0.0) + increments[k];
      const double r = y_[k] / w_[k];
      stat = rule_ == LocalFusionRule::all_sensors ? std::min(stat, r) : std::max(stat, r);
      if (r >= message_scale_) ++messages_;
    }
    return {true, stat, std::nullopt};
  }

  std::span<const double> local_statistics() const { return y_; }
  std::int64_t messages() const { return messages_; }
  std::int64_t bits() const { return messages_; }

 private:
  LocalFusionRule rule_;
  std::vector<double> w_;
  std::vector<double> y_;
  double message_scale_;
  std::int64_t messages_ = 0;
};

/// Drives a detector over a materialized bundle until statistic >= threshold.
template <class Det>
StoppingResult run_on_bundle(Det& det, const PathBundle& paths, double threshold, std::string name) {
  StoppingResult r;
  r.detector = std::move(name);
  std::vector<double> step(paths.sensors());
  double u = 0.0;
  for (std::int64_t t = 1; t <= paths.horizon; ++t) {
    for (std::size_t k = 0; k < step.size(); ++k) step[k] = paths.increments[k][static_cast<std::size_t>(t - 1)];
    for (double v : step) u += v;
    const Observation obs = det.step(step, threshold);
    if (obs.evaluated && obs.statistic >= threshold) {
      r.stopped = true;
      r.stop_time = t;
      r.statistic_at_stop = obs.statistic;
      r.u_at_stop = obs.floor ? *obs.floor + threshold : u;
      r.messages_consumed = det.messages();
      r.bits_transmitted = det.bits();
      return r;
    }
  }
  r.stop_time = paths.horizon;
  r.u_at_stop = u;
  r.messages_consumed = det.messages();
  r.bits_transmitted = det.bits();
  return r;
}

inline StoppingResult run_centralized(const PathBundle& paths, double nu) {
  if (!(nu > 0.0)) throw std::invalid_argument("run_centralized: threshold must be positive");
  CentralizedCusum det;
  return run_on_bundle(det, paths, nu, "centralized");
}

inline StoppingResult run_qcusum(const PathBundle& paths, const QcusumConfig& cfg) {
  cfg.validate();
  if (cfg.sensors.size() != paths.sensors()) throw std::invalid_argument("run_qcusum: sensor count mismatch");
  QCusum det(cfg);
  return run_on_bundle(det, paths, cfg.nu_hat, "qcusum");
}

inline StoppingResult run_mei(const PathBundle& paths, const LocalCusumBank& bank) {
  bank.validate(paths.sensors());
  LocalCusumFusion det(LocalFusionRule::all_sensors, bank.thresholds);
  return run_on_bundle(det, paths, 1.0, "mei");
}

inline StoppingResult run_mincusum(const PathBundle& paths, const LocalCusumBank& bank) {
  bank.validate(paths.sensors());
  LocalCusumFusion det(LocalFusionRule::any_sensor, bank.thresholds);
  return run_on_bundle(det, paths, 1.0, "mincusum");
}

/// D-CUSUM over a time-ordered message stream. The alarm time is the arrival
/// time of the triggering instant; messages of that instant are counted.
inline StoppingResult run_dcusum(std::span<const Message> messages, const QuantizerConfig& cfg, double nu_tilde) {
  if (!(nu_tilde > 0.0)) throw std::invalid_argument("run_dcusum: threshold must be positive");
  FusionCenter fusion(cfg);
  StoppingResult r;
  r.detector = "dcusum";
  std::size_t i = 0;
  while (i < messages.size()) {
    std::size_t j = i;
    while (j < messages.size() && messages[j].time == messages[i].time) ++j;
    if (j < messages.size() && messages[j].time < messages[i].time) {
      throw std::invalid_argument("run_dcusum: messages must be time-ordered");
    }
    const double y = fusion.consume(messages.subspan(i, j - i));
    r.stop_time = messages[i].time;
    if (y >= nu_tilde) {
      r.stopped = true;
      r.statistic_at_stop = y;
      r.u_at_stop = fusion.u_tilde();
      break;
    }
    i = j;
  }
  r.messages_consumed = fusion.messages();
  r.bits_transmitted = fusion.bits();
  return r;
}

/// Merges per-sensor message streams into (time, sensor) order.
inline std::vector<Message> merge_messages(std::vector<std::vector<Message>> per_sensor) {
  std::vector<Message> all;
  for (auto& v : per_sensor) all.insert(all.end(), v.begin(), v.end());
  std::sort(all.begin(), all.end(), [](const Message& a, const Message& b) {
    return a.time != b.time ? a.time < b.time : a.sensor < b.sensor;
  });
  return all;
}

}  // namespace qcd

#endif  // QCD_DETECTORS_HPP
