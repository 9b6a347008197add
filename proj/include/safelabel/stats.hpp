#ifndef SAFELABEL_STATS_HPP
#define SAFELABEL_STATS_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <boost/math/distributions/normal.hpp>

namespace safelabel::stats {

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Sample variance with the n-1 divisor. NaN when fewer than two values.
inline double variance(std::span<const double> xs) {
  const std::size_t n = xs.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return ss / static_cast<double>(n - 1);
}

inline double stddev(std::span<const double> xs) { return std::sqrt(variance(xs)); }

inline double covariance(std::span<const double> xs, std::span<const double> ys) {
  const std::size_t n = xs.size();
  if (n != ys.size()) throw std::invalid_argument("covariance: length mismatch");
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  const double mx = mean(xs), my = mean(ys);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (xs[i] - mx) * (ys[i] - my);
  return s / static_cast<double>(n - 1);
}

/// Hyndman-Fan type 7 quantile (linear interpolation between order
/// statistics); the default of R and NumPy.
inline double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  if (p <= 0.0) return sorted.front();
  if (p >= 1.0) return sorted.back();
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> xs, double p) {
  std::sort(xs.begin(), xs.end());
  return quantile_sorted(xs, p);
}

inline double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

/// Two-sided critical value for a central interval of the given level.
inline double normal_critical(double level) { return normal_quantile(0.5 + 0.5 * level); }

}  // namespace safelabel::stats

#endif
