#ifndef QCD_STATS_HPP
#define QCD_STATS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace qcd {

/// Monte-Carlo point estimate with its standard error.
struct Estimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

/// Welford accumulator. Merging is order-dependent in the last bits, so
/// callers that need bit-exact results reduce in a fixed order.
class RunningStats {
 public:
  void add(double x) {
    ++n_;
    const double delta = x - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta * (x - mean_);
  }

  std::size_t count() const { return n_; }
  double mean() const { return mean_; }
  double variance() const { return n_ > 1 ? m2_ / static_cast<double>(n_ - 1) : 0.0; }
  double std_error() const {
    return n_ > 1 ? std::sqrt(variance() / static_cast<double>(n_)) : 0.0;
  }
  Estimate estimate() const { return {mean(), std_error(), n_}; }

 private:
  std::size_t n_ = 0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline Estimate estimate_of(std::span<const double> xs) {
  RunningStats s;
  for (double x : xs) s.add(x);
  return s.estimate();
}

inline double combined_std_error(const Estimate& a, const Estimate& b) {
  return std::hypot(a.std_error, b.std_error);
}

/// |a - b| within k combined standard errors.
inline bool agree_within(const Estimate& a, const Estimate& b, double k = 3.0) {
  return std::abs(a.mean - b.mean) <= k * combined_std_error(a, b);
}

/// Ratio estimate mean(num)/mean(den) from paired samples, delta-method error.
inline Estimate ratio_estimate(std::span<const double> num, std::span<const double> den) {
  if (num.size() != den.size() || num.empty()) {
    throw std::invalid_argument("ratio_estimate: mismatched or empty samples");
  }
  const double n = static_cast<double>(num.size());
  double sn = 0.0, sd = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    sn += num[i];
    sd += den[i];
  }
  const double mn = sn / n, md = sd / n;
  if (md == 0.0) throw std::domain_error("ratio_estimate: zero denominator mean");
  const double r = mn / md;
  double ss = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    const double e = num[i] - r * den[i];
    ss += e * e;
  }
  const double var = num.size() > 1 ? ss / (n - 1.0) : 0.0;
  return {r, std::sqrt(var / n) / std::abs(md), num.size()};
}

/// Empirical p-quantile by lower order statistic: sorted[floor(p (n-1))].
inline double lower_quantile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("lower_quantile: empty sample");
  if (p <= 0.0) return sorted.front();
  if (p >= 1.0) return sorted.back();
  const auto idx =
      static_cast<std::size_t>(std::floor(p * static_cast<double>(sorted.size() - 1)));
  return sorted[idx];
}

}  // namespace qcd

#endif  // QCD_STATS_HPP
