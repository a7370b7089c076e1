#ifndef QCD_MODEL_HPP
#define QCD_MODEL_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "qcd/rng.hpp"

namespace qcd {

enum class ModelKind { gaussian_mean_shift, brownian_drift };

/// How a Brownian path is monitored between grid points.
///
/// `grid` compares the sampled values only. `bridge` additionally samples the
/// Brownian bridge between consecutive grid values, so boundary crossings
/// inside a step are detected and exits land exactly on the boundary.
enum class Monitoring { grid, bridge };

/// Change time meaning "no change" (the pre-change law forever).
inline constexpr std::int64_t kNoChange = std::numeric_limits<std::int64_t>::max();

/// Law of the per-sensor log-likelihood-ratio increments.
///
/// GaussianMeanShift: one step is one observation, increment mu*xi - mu^2/2
/// with xi ~ N(0,1) before and N(mu,1) after the change.
/// BrownianDrift: one step is a grid cell of width dt, increment
/// mu*dW - mu^2 dt/2 with dW ~ N(0,dt) before and N(mu dt, dt) after.
/// Both reduce to mu*sqrt(dt)*Z -/+ mu^2 dt/2 (dt = 1 for the Gaussian case).
struct SensorModel {
  ModelKind kind = ModelKind::gaussian_mean_shift;
  std::vector<double> mus;
  double dt = 1.0;
  Monitoring monitoring = Monitoring::grid;

  static SensorModel gaussian(std::vector<double> mus) {
    SensorModel m{ModelKind::gaussian_mean_shift, std::move(mus), 1.0, Monitoring::grid};
    m.validate();
    return m;
  }
  static SensorModel gaussian(std::size_t sensors, double mu) {
    return gaussian(std::vector<double>(sensors, mu));
  }
  static SensorModel brownian(std::vector<double> mus, double dt = 1e-3,
                              Monitoring monitoring = Monitoring::bridge) {
    SensorModel m{ModelKind::brownian_drift, std::move(mus), dt, monitoring};
    m.validate();
    return m;
  }
  static SensorModel brownian(std::size_t sensors, double mu, double dt = 1e-3,
                              Monitoring monitoring = Monitoring::bridge) {
    return brownian(std::vector<double>(sensors, mu), dt, monitoring);
  }

  void validate() const {
    if (mus.empty()) throw std::invalid_argument("SensorModel: need at least one sensor");
    for (double mu : mus) {
      if (!(mu != 0.0) || !std::isfinite(mu)) {
        throw std::invalid_argument("SensorModel: every post-change mean must be finite and nonzero");
      }
    }
    if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("SensorModel: dt must be positive");
    if (kind == ModelKind::gaussian_mean_shift && dt != 1.0) {
      throw std::invalid_argument("SensorModel: Gaussian mean-shift model has unit steps");
    }
  }

  std::size_t sensors() const { return mus.size(); }
  bool continuous() const { return kind == ModelKind::brownian_drift; }
  bool bridged() const { return continuous() && monitoring == Monitoring::bridge; }

  /// Variance of one step's LLR increment (identical before and after the change).
  double step_variance(std::size_t k) const { return mus[k] * mus[k] * dt; }
  double pooled_step_variance() const {
    double v = 0.0;
    for (std::size_t k = 0; k < sensors(); ++k) v += step_variance(k);
    return v;
  }
  /// Mean of one step's LLR increment: +I0 dt after the change, -Iinf dt before.
  double step_drift(std::size_t k, bool post_change) const {
    const double half = 0.5 * mus[k] * mus[k] * dt;
    return post_change ? half : -half;
  }
  double step_scale(std::size_t k) const { return std::abs(mus[k]) * std::sqrt(dt); }

  std::string kind_name() const {
    return kind == ModelKind::gaussian_mean_shift ? "gaussian" : "brownian";
  }
};

/// Kullback-Leibler numbers per unit of physical time.
struct KLNumbers {
  std::vector<double> i0;
  std::vector<double> iinf;
  double ibar0 = 0.0;
  double ibar_inf = 0.0;
};

inline KLNumbers kl_numbers(const SensorModel& model) {
  model.validate();
  KLNumbers kl;
  for (double mu : model.mus) {
    kl.i0.push_back(0.5 * mu * mu);
    kl.iinf.push_back(0.5 * mu * mu);
  }
  const auto k = static_cast<double>(model.sensors());
  kl.ibar0 = std::accumulate(kl.i0.begin(), kl.i0.end(), 0.0) / k;
  kl.ibar_inf = std::accumulate(kl.iinf.begin(), kl.iinf.end(), 0.0) / k;
  return kl;
}

/// Streams the LLR increments of all sensors for one replication. Sensor k
/// draws from substream (seed, replication, k), so sensors are independent
/// and any sensor's path is the same whatever other sensors exist.
class PathStream {
 public:
  PathStream(const SensorModel& model, std::int64_t change_time, std::uint64_t seed,
             std::uint64_t replication)
      : change_time_(change_time) {
    model.validate();
    if (change_time < 0) throw std::invalid_argument("PathStream: negative change time");
    const std::size_t k = model.sensors();
    streams_.reserve(k);
    for (std::size_t s = 0; s < k; ++s) {
      streams_.emplace_back(StreamId{seed, replication, s});
      scale_.push_back(model.step_scale(s));
      drift_pre_.push_back(model.step_drift(s, false));
      drift_post_.push_back(model.step_drift(s, true));
    }
  }

  std::size_t sensors() const { return streams_.size(); }
  std::int64_t time() const { return t_; }

  /// Draws step t+1 into `out` (one value per sensor); returns the new step index.
  std::int64_t next(std::span<double> out) {
    ++t_;
    const bool post = t_ > change_time_;
    const auto& drift = post ? drift_post_ : drift_pre_;
    for (std::size_t s = 0; s < streams_.size(); ++s) {
      out[s] = scale_[s] * streams_[s].normal() + drift[s];
    }
    return t_;
  }

 private:
  std::int64_t change_time_;
  std::int64_t t_ = 0;
  std::vector<Substream> streams_;
  std::vector<double> scale_, drift_pre_, drift_post_;
};

/// Materialized increments: increments[k][t-1] is sensor k's step-t increment.
struct PathBundle {
  std::int64_t change_time = kNoChange;
  std::int64_t horizon = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> increments;

  std::size_t sensors() const { return increments.size(); }
};

inline PathBundle generate_paths(const SensorModel& model, std::int64_t change_time,
                                 std::int64_t horizon, std::uint64_t seed) {
  if (horizon <= 0) throw std::invalid_argument("generate_paths: horizon must be positive");
  PathStream stream(model, change_time, seed, 0);
  PathBundle bundle{change_time, horizon, seed,
                    std::vector<std::vector<double>>(model.sensors(),
                                                     std::vector<double>(static_cast<std::size_t>(horizon)))};
  std::vector<double> step(model.sensors());
  for (std::int64_t t = 0; t < horizon; ++t) {
    stream.next(step);
    for (std::size_t k = 0; k < step.size(); ++k) {
      bundle.increments[k][static_cast<std::size_t>(t)] = step[k];
    }
  }
  return bundle;
}

/// Mean accumulated LLR at a two-sided exit of a Brownian LLR with unit
/// diffusion/drift ratio: E0[l] = s(lower, upper), Einf[-l] = s(upper, lower).
inline double s_function(double x, double y) {
  if (!(x > 0.0) || !(y > 0.0)) throw std::invalid_argument("s_function: arguments must be positive");
  const double num = -x * std::expm1(y) + y * std::exp(y) * std::expm1(x);
  return num / std::expm1(x + y);
}

/// Continuous-time CUSUM performance in KL units for threshold nu.
struct CtPerformance {
  double gamma = 0.0;  ///< Einf[-u_S] = e^nu - nu - 1
  double delay = 0.0;  ///< E0[u_S] = e^-nu + nu - 1
};

inline CtPerformance ct_closed_forms(double nu) {
  if (!(nu > 0.0)) throw std::invalid_argument("ct_closed_forms: nu must be positive");
  return {std::expm1(nu) - nu, std::expm1(-nu) + nu};
}

/// Inverse of gamma = e^nu - nu - 1.
inline double ct_threshold_for_gamma(double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("ct_threshold_for_gamma: gamma must be positive");
  auto f = [gamma](double nu) {
    return std::make_pair(std::expm1(nu) - nu - gamma, std::expm1(nu));
  };
  // For small gamma, nu ~ sqrt(2 gamma); for large, nu ~ log(gamma).
  const double guess = gamma < 1.0 ? std::sqrt(2.0 * gamma) : std::log1p(gamma) + 1.0;
  std::uintmax_t iters = 200;
  return boost::math::tools::newton_raphson_iterate(f, guess, 0.0, std::log1p(gamma) + 2.0 * std::sqrt(gamma) + 2.0,
                                                    52, iters);
}

/// Brownian-bridge helpers for a step from a to b with step variance var.
namespace bridge {

/// P(max of the bridge >= level) for level above both endpoints.
inline double exceed_probability(double a, double b, double level, double var) {
  if (a >= level || b >= level) return 1.0;
  return std::exp(-2.0 * (level - a) * (level - b) / var);
}

/// P(min of the bridge <= level) for level below both endpoints.
inline double undershoot_probability(double a, double b, double level, double var) {
  if (a <= level || b <= level) return 1.0;
  return std::exp(-2.0 * (a - level) * (b - level) / var);
}

/// Exact draw of the bridge maximum given u in (0, 1].
inline double sample_max(double a, double b, double var, double u) {
  return 0.5 * (a + b + std::sqrt((b - a) * (b - a) - 2.0 * var * std::log(u)));
}

/// Exact draw of the bridge minimum given u in (0, 1].
inline double sample_min(double a, double b, double var, double u) {
  return 0.5 * (a + b - std::sqrt((b - a) * (b - a) - 2.0 * var * std::log(u)));
}

/// Below this probability a within-step crossing is treated as impossible.
inline constexpr double kNegligible = 1e-14;

}  // namespace bridge

}  // namespace qcd

#endif  // QCD_MODEL_HPP
