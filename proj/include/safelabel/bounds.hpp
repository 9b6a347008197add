#ifndef SAFELABEL_BOUNDS_HPP
#define SAFELABEL_BOUNDS_HPP

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safelabel/context.hpp"
#include "safelabel/error.hpp"
#include "safelabel/moment.hpp"
#include "safelabel/population.hpp"

namespace safelabel {

/// Sup-norm band: |m^(r) - f*(r)| <= delta on every piece with q^D > 0.
struct GuaranteeBand {
  double delta = 0.0;

  void validate() const {
    if (!(delta >= 0.0) || !std::isfinite(delta))
      throw ValidationError("band delta must be finite and nonnegative");
  }
};

/// Sup of |dg/dv| over v_domain x (population covariates) x Theta.
inline double derivative_bound(const Population& pop, const MomentSpec& moment) {
  moment.validate(pop.k());
  if (!moment.v_domain.bounded())
    throw NumericError("unbounded derivative: v-domain is not bounded");
  for (const auto& iv : moment.theta_box)
    if (!iv.bounded()) throw NumericError("unbounded derivative: theta box is not bounded");
  double g = 0.0;
  for (const auto& p : pop.pieces()) g = std::max(g, moment.derivative_range(p.w).max_abs());
  if (!std::isfinite(g)) throw NumericError("unbounded derivative on the domain");
  return g;
}

namespace detail {

inline bool sensitive_piece(const MomentSpec& moment, std::span<const double> w) {
  return moment.derivative_range(w).min_abs() >= moment.g_lower;
}

}  // namespace detail

/// Pieces with q^D > 0 whose |dg/dv| stays at or above g_lower for every
/// (v, theta) in the domain. Returned in population order.
inline std::vector<std::string> sensitive_set(const Population& pop, const ResearchContext& ctx,
                                              const MomentSpec& moment) {
  if (ctx.size() != pop.size()) throw ValidationError("context and population sizes differ");
  moment.validate(pop.k());
  std::vector<std::string> ids;
  for (std::size_t r = 0; r < pop.size(); ++r)
    if (ctx.q_d(r) > 0.0 && detail::sensitive_piece(moment, pop[r].w)) ids.push_back(pop[r].id);
  return ids;
}

/// Maximizes h(d) = g(v0 + d) - g(v0) over [lo, hi]: both endpoints plus 201
/// interior grid points, then a golden-section pass on the bracket around
/// the best grid point. Returns the maximizing d.
template <typename F>
double band_argmax(F&& h, double lo, double hi) {
  if (!(hi > lo)) return lo;
  constexpr int interior = 201;
  const double step = (hi - lo) / (interior + 1);
  double best_d = lo, best_h = h(lo);
  auto consider = [&](double d) {
    const double v = h(d);
    if (v > best_h) {
      best_h = v;
      best_d = d;
    }
  };
  for (int i = 1; i <= interior; ++i) consider(lo + step * i);
  consider(hi);
  // Golden-section refinement over the neighbouring grid cells.
  double a = std::max(lo, best_d - step), b = std::min(hi, best_d + step);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double hc = h(c), hd = h(d);
  for (int it = 0; it < 60 && (b - a) > 1e-14 * (1.0 + std::abs(a)); ++it) {
    if (hc > hd) {
      b = d;
      d = c;
      hd = hc;
      c = b - inv_phi * (b - a);
      hc = h(c);
    } else {
      a = c;
      c = d;
      hc = hd;
      d = a + inv_phi * (b - a);
      hd = h(d);
    }
  }
  consider(c);
  consider(d);
  return best_d;
}

struct AdversarialResult {
  std::vector<double> delta_r;  ///< per-piece perturbation, 0 where q^D = 0
  double achieved_error = 0.0;
  double lower_bound = 0.0;
  double upper_bound = 0.0;
  double g_upper = 0.0;
  std::size_t sensitive_count = 0;
};

/// Worst-case band member: per piece, the perturbation in [-delta, delta]
/// (restricted to keep v inside v_domain) that maximizes the increase in g,
/// kept when the increase is nonnegative. Errors are computed with leakage
/// ratios fixed at 1. The upper bound is Gbar * delta * sum q^D.
inline AdversarialResult adversarial_band_member(const Population& pop, const ResearchContext& ctx,
                                                 const MomentSpec& moment, const GuaranteeBand& band,
                                                 std::span<const double> theta) {
  if (ctx.size() != pop.size()) throw ValidationError("context and population sizes differ");
  band.validate();
  moment.validate(pop.k());
  moment.require_admissible(theta);
  AdversarialResult out;
  out.g_upper = derivative_bound(pop, moment);
  out.delta_r.assign(pop.size(), 0.0);

  // Per-piece contributions are independent; sums run in index order.
  std::vector<double> gain(pop.size(), 0.0);
  double mass = 0.0;
  for (std::size_t r = 0; r < pop.size(); ++r) {
    const double qd = ctx.q_d(r);
    if (!(qd > 0.0)) continue;
    mass += qd;
    const auto& p = pop[r];
    if (!p.v_true) throw ValidationError("truth value missing on sampled piece '" + p.id + "'");
    const double v0 = *p.v_true;
    if (!moment.v_domain.contains(v0))
      throw ValidationError("truth value of piece '" + p.id + "' lies outside the v-domain");
    if (band.delta == 0.0) continue;
    const double lo = std::max(-band.delta, moment.v_domain.lo - v0);
    const double hi = std::min(band.delta, moment.v_domain.hi - v0);
    const double g0 = moment.value(v0, p.w, theta);
    auto h = [&](double d) { return moment.value(v0 + d, p.w, theta) - g0; };
    const double best = band_argmax(h, lo, hi);
    const double hb = h(best);
    out.delta_r[r] = hb >= 0.0 ? best : 0.0;
    gain[r] = hb >= 0.0 ? hb : 0.0;
  }
  for (std::size_t r = 0; r < pop.size(); ++r) {
    const double qd = ctx.q_d(r);
    if (!(qd > 0.0)) continue;
    out.achieved_error += qd * gain[r];
    if (detail::sensitive_piece(moment, pop[r].w)) {
      ++out.sensitive_count;
      out.lower_bound += moment.g_lower * std::abs(out.delta_r[r]) * qd;
    }
  }
  out.upper_bound = out.g_upper * band.delta * mass;
  return out;
}

/// Estimation error sum q^D_r (g(f* + delta_r) - g(f*)) for an arbitrary
/// perturbation vector (no leakage).
inline double band_member_error(const Population& pop, const ResearchContext& ctx,
                                const MomentSpec& moment, std::span<const double> perturbation,
                                std::span<const double> theta) {
  double s = 0.0;
  for (std::size_t r = 0; r < pop.size(); ++r) {
    const double qd = ctx.q_d(r);
    if (!(qd > 0.0)) continue;
    const auto& p = pop[r];
    const double v0 = p.v_true.value();
    s += qd * (moment.value(v0 + perturbation[r], p.w, theta) - moment.value(v0, p.w, theta));
  }
  return s;
}

struct GptWitness {
  std::size_t moment_index = 0;
  std::vector<double> theta;
  double error = 0.0;
  double lower_bound = 0.0;
};

struct GptVerdict {
  bool is_gpt = false;
  std::optional<GptWitness> witness;
};

/// General-purpose verdict for estimation: true iff delta = 0. Otherwise the
/// adversarial band member evaluated at each moment's theta-box center
/// supplies a witness with nonzero error.
inline GptVerdict gpt_for_estimation_check(const Population& pop, const ResearchContext& ctx,
                                           std::span<const MomentSpec> moments,
                                           const GuaranteeBand& band) {
  band.validate();
  std::optional<std::size_t> sensitive_moment;
  for (std::size_t m = 0; m < moments.size() && !sensitive_moment; ++m)
    if (!sensitive_set(pop, ctx, moments[m]).empty()) sensitive_moment = m;
  if (!sensitive_moment)
    throw ValidationError("no sensitive moment supplied: the verdict is undefined");

  GptVerdict verdict;
  if (band.delta == 0.0) {
    verdict.is_gpt = true;
    return verdict;
  }
  for (std::size_t m = 0; m < moments.size(); ++m) {
    if (sensitive_set(pop, ctx, moments[m]).empty()) continue;
    const auto theta = moments[m].theta_center();
    const auto res = adversarial_band_member(pop, ctx, moments[m], band, theta);
    if (std::abs(res.achieved_error) > 0.0) {
      verdict.witness = GptWitness{m, theta, res.achieved_error, res.lower_bound};
      return verdict;
    }
  }
  // A sensitive piece with positive band always admits a positive gain; this
  // is reachable only if every perturbation is clipped to zero by v_domain.
  throw NumericError("no witness found: band collapses at every sensitive piece");
}

}  // namespace safelabel

#endif
