#ifndef SAFELABEL_MOMENT_HPP
#define SAFELABEL_MOMENT_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "safelabel/error.hpp"

namespace safelabel {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double x) const noexcept { return lo <= x && x <= hi; }
  bool empty() const noexcept { return !(lo <= hi); }
  bool bounded() const noexcept { return std::isfinite(lo) && std::isfinite(hi); }
  double width() const noexcept { return hi - lo; }
  double max_abs() const noexcept { return std::max(std::abs(lo), std::abs(hi)); }
  /// Smallest |x| over the interval.
  double min_abs() const noexcept {
    if (lo <= 0.0 && 0.0 <= hi) return 0.0;
    return std::min(std::abs(lo), std::abs(hi));
  }
};

/// The registered moment families:
///   product   g = v * w_j
///   residual  g = (v - w'theta) * w_j
///   squared   g = (v - w'theta)^2
enum class MomentFamily { product, residual, squared };

inline std::string to_string(MomentFamily f) {
  switch (f) {
    case MomentFamily::product: return "product";
    case MomentFamily::residual: return "residual";
    case MomentFamily::squared: return "squared";
  }
  return "?";
}

inline MomentFamily moment_family_from_string(const std::string& s) {
  if (s == "product") return MomentFamily::product;
  if (s == "residual") return MomentFamily::residual;
  if (s == "squared") return MomentFamily::squared;
  throw ValidationError("unknown moment family '" + s + "'");
}

/// A moment function g(v, w; theta) with its admissible parameter box and
/// concept domain. `g_lower` is the sensitivity threshold.
struct MomentSpec {
  MomentFamily family = MomentFamily::product;
  std::size_t column = 0;
  std::vector<Interval> theta_box;
  Interval v_domain{-1e6, 1e6};
  double g_lower = 1e-3;

  bool uses_theta() const noexcept { return family != MomentFamily::product; }

  void validate(std::size_t k) const {
    if (!(g_lower > 0.0)) throw ValidationError("g_lower must be positive");
    if (v_domain.empty()) throw ValidationError("empty v-domain");
    if (family != MomentFamily::squared && column >= k)
      throw ValidationError("moment column w_" + std::to_string(column) + " out of range");
    if (uses_theta() && theta_box.size() != k)
      throw ValidationError("theta box must have one interval per covariate (k=" +
                            std::to_string(k) + ")");
    for (const auto& iv : theta_box)
      if (iv.empty()) throw ValidationError("empty theta box");
  }

  bool admissible(std::span<const double> theta) const noexcept {
    if (!uses_theta()) return true;
    if (theta.size() != theta_box.size()) return false;
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (!theta_box[i].contains(theta[i])) return false;
    return true;
  }

  void require_admissible(std::span<const double> theta) const {
    if (!admissible(theta)) throw ValidationError("theta outside the admissible set");
  }

  double value(double v, std::span<const double> w, std::span<const double> theta) const {
    switch (family) {
      case MomentFamily::product: return v * w[column];
      case MomentFamily::residual: return (v - dot(w, theta)) * w[column];
      case MomentFamily::squared: {
        const double r = v - dot(w, theta);
        return r * r;
      }
    }
    return 0.0;
  }

  double dv(double v, std::span<const double> w, std::span<const double> theta) const {
    switch (family) {
      case MomentFamily::product:
      case MomentFamily::residual: return w[column];
      case MomentFamily::squared: return 2.0 * (v - dot(w, theta));
    }
    return 0.0;
  }

  /// Exact range of dg/dv over v_domain x theta_box at fixed covariates. Each
  /// family's derivative is affine in (v, theta), so interval arithmetic is
  /// tight.
  Interval derivative_range(std::span<const double> w) const {
    switch (family) {
      case MomentFamily::product:
      case MomentFamily::residual: return {w[column], w[column]};
      case MomentFamily::squared: {
        double lo = 0.0, hi = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double a = w[i] * theta_box[i].lo, b = w[i] * theta_box[i].hi;
          lo += std::min(a, b);
          hi += std::max(a, b);
        }
        return {2.0 * (v_domain.lo - hi), 2.0 * (v_domain.hi - lo)};
      }
    }
    return {};
  }

  std::vector<double> theta_center() const {
    std::vector<double> c;
    c.reserve(theta_box.size());
    for (const auto& iv : theta_box) c.push_back(0.5 * (iv.lo + iv.hi));
    return c;
  }

private:
  static double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
};

}  // namespace safelabel

#endif
