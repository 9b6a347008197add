#ifndef SAFELABEL_CONTEXT_HPP
#define SAFELABEL_CONTEXT_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "safelabel/error.hpp"
#include "safelabel/moment.hpp"
#include "safelabel/population.hpp"
#include "safelabel/rng.hpp"

namespace safelabel {

/// Joint law of (D, T) for one string: p(d, tau) for d, tau in {0, 1}.
/// Stored as the full 2x2 table so every derived rate is consistent.
class SamplingTable {
public:
  static constexpr double sum_tolerance = 1e-12;

  SamplingTable() : p_{0.0, 0.0, 0.0, 1.0} {}

  SamplingTable(double p00, double p01, double p10, double p11) : p_{p00, p01, p10, p11} {
    double s = 0.0;
    for (double x : p_) {
      if (!(x >= 0.0) || !std::isfinite(x))
        throw ValidationError("sampling table entries must be finite and nonnegative");
      s += x;
    }
    if (std::abs(s - 1.0) > sum_tolerance)
      throw ValidationError("sampling table entries must sum to 1");
  }

  /// D and T independent with P(D=1) = q_d and P(T=1) = q_t.
  static SamplingTable independent(double q_d, double q_t) {
    return {(1 - q_d) * (1 - q_t), (1 - q_d) * q_t, q_d * (1 - q_t), q_d * q_t};
  }

  double p(int d, int tau) const { return p_[static_cast<std::size_t>(2 * d + tau)]; }

  /// q^D = P(D = 1).
  double q_d() const { return p_[2] + p_[3]; }
  /// q^T(tau) = P(T = tau).
  double q_t(int tau) const { return p(0, tau) + p(1, tau); }
  /// q^{T|D}(tau) = P(T = tau | D = 1); requires q^D > 0.
  double q_t_given_d(int tau) const {
    const double qd = q_d();
    if (!(qd > 0.0)) throw ValidationError("q^{T|D} undefined when q^D = 0");
    return p(1, tau) / qd;
  }
  /// q^{T|D}(t) / q^T(t): how much learning D = 1 updates belief in T = t.
  double leakage_ratio(int t) const { return q_t_given_d(t) / q_t(t); }

  const std::array<double, 4>& entries() const noexcept { return p_; }

private:
  std::array<double, 4> p_;
};

/// Per-piece sampling tables and the realized training draw t_r.
class ResearchContext {
public:
  ResearchContext(std::vector<SamplingTable> tables, std::vector<int> t_realized)
      : tables_(std::move(tables)), t_(std::move(t_realized)) {
    if (tables_.size() != t_.size())
      throw ValidationError("context: one realized training bit per table required");
    for (std::size_t r = 0; r < tables_.size(); ++r) {
      if (t_[r] != 0 && t_[r] != 1) throw ValidationError("context: t must be 0 or 1");
      if (!(tables_[r].q_t(t_[r]) > 0.0))
        throw ValidationError("context: realized training draw has probability 0 at piece " +
                              std::to_string(r));
    }
  }

  std::size_t size() const noexcept { return tables_.size(); }
  const SamplingTable& table(std::size_t r) const { return tables_[r]; }
  int t(std::size_t r) const { return t_[r]; }
  const std::vector<int>& t_realized() const noexcept { return t_; }

  double q_d(std::size_t r) const { return tables_[r].q_d(); }
  /// Leakage ratio at the realized draw; 1 when the piece is never sampled.
  double ratio(std::size_t r) const {
    return tables_[r].q_d() > 0.0 ? tables_[r].leakage_ratio(t_[r]) : 1.0;
  }

  double expected_sample_size() const {
    double s = 0.0;
    for (const auto& tab : tables_) s += tab.q_d();
    return s;
  }

  double conditional_expected_sample_size() const {
    double s = 0.0;
    for (std::size_t r = 0; r < size(); ++r) s += q_d(r) * ratio(r);
    return s;
  }

  /// Whether the expected sample size is unaffected by conditioning on T = t.
  /// Reported, not enforced.
  bool balanced_size(double tolerance = 1e-9) const {
    const double a = expected_sample_size(), b = conditional_expected_sample_size();
    return std::abs(a - b) <= tolerance * std::max(1.0, std::abs(a));
  }

  bool degenerate() const {
    for (const auto& tab : tables_)
      if (tab.q_d() > 0.0) return false;
    return true;
  }

private:
  std::vector<SamplingTable> tables_;
  std::vector<int> t_;
};

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { squared, absolute, zero_one };

struct LossSpec {
  LossKind kind = LossKind::squared;

  double operator()(double y, double yhat) const {
    switch (kind) {
      case LossKind::squared: return (y - yhat) * (y - yhat);
      case LossKind::absolute: return std::abs(y - yhat);
      case LossKind::zero_one: return y == yhat ? 0.0 : 1.0;
    }
    return 0.0;
  }
};

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "squared") return LossKind::squared;
  if (s == "absolute") return LossKind::absolute;
  if (s == "zero_one") return LossKind::zero_one;
  throw ValidationError("unknown loss '" + s + "'");
}

// ---------------------------------------------------------------------------
// Leakage decomposition

struct PredictionLeakage {
  double unconditional = 0.0;  ///< E[sum D_r l_r]
  double conditional = 0.0;    ///< E[sum D_r l_r | T = t]
  double leakage_bias = 0.0;   ///< sum q^D_r (ratio_r - 1) l_r
  double loss_mass = 0.0;      ///< sum q^D_r |l_r|, scale for the leakage-free verdict

  /// Relative verdict: |bias| <= 1e-9 * sum q^D |l|.
  bool leakage_free(double rel_tol = 1e-9) const {
    return std::abs(leakage_bias) <= rel_tol * loss_mass;
  }
};

/// Decomposition from per-piece losses. Entries with q^D = 0 are ignored.
/// `unconditional` is formed as conditional - leakage_bias so the identity
/// holds bit for bit.
inline PredictionLeakage leakage_from_losses(const ResearchContext& ctx,
                                             std::span<const double> losses) {
  if (losses.size() != ctx.size()) throw ValidationError("one loss per piece required");
  if (ctx.degenerate()) throw ValidationError("degenerate context: q^D = 0 for every piece");
  PredictionLeakage out;
  for (std::size_t r = 0; r < ctx.size(); ++r) {
    const double qd = ctx.q_d(r);
    if (!(qd > 0.0)) continue;
    const double ratio = ctx.ratio(r);
    out.conditional += qd * ratio * losses[r];
    out.leakage_bias += qd * (ratio - 1.0) * losses[r];
    out.loss_mass += qd * std::abs(losses[r]);
  }
  out.unconditional = out.conditional - out.leakage_bias;
  return out;
}

/// Prediction-problem leakage for loss l(y_r, yhat_r). Outcomes and
/// predictions are required on every piece the researcher may sample.
inline PredictionLeakage leakage_term_prediction(const Population& pop, const ResearchContext& ctx,
                                                 const LossSpec& loss,
                                                 std::span<const double> predictions) {
  if (ctx.size() != pop.size()) throw ValidationError("context and population sizes differ");
  if (predictions.size() != pop.size()) throw ValidationError("one prediction per piece required");
  std::vector<double> losses(pop.size(), 0.0);
  for (std::size_t r = 0; r < pop.size(); ++r) {
    if (!(ctx.q_d(r) > 0.0)) continue;
    const auto& p = pop[r];
    if (!p.y) throw ValidationError("outcome y missing on sampled piece '" + p.id + "'");
    if (!std::isfinite(predictions[r]))
      throw ValidationError("prediction missing on sampled piece '" + p.id + "'");
    losses[r] = loss(*p.y, predictions[r]);
  }
  return leakage_from_losses(ctx, losses);
}

/// Estimation-problem leakage: sum q^D_r (ratio_r - 1) g(V^_r, W_r; theta).
inline double leakage_term_estimation(const Population& pop, const ResearchContext& ctx,
                                      const MomentSpec& moment, const std::string& labeler,
                                      std::span<const double> theta) {
  if (ctx.size() != pop.size()) throw ValidationError("context and population sizes differ");
  moment.validate(pop.k());
  moment.require_admissible(theta);
  double s = 0.0;
  for (std::size_t r = 0; r < pop.size(); ++r) {
    const double qd = ctx.q_d(r);
    if (!(qd > 0.0)) continue;
    const auto& p = pop[r];
    auto it = p.labels.find(labeler);
    if (it == p.labels.end())
      throw ValidationError("labeler '" + labeler + "' missing on sampled piece '" + p.id + "'");
    s += qd * (ctx.ratio(r) - 1.0) * moment.value(it->second, p.w, theta);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Brute-force oracle

struct EnumeratedExpectations {
  double e_unconditional = 0.0;
  double e_conditional_on_t = 0.0;
};

inline constexpr std::size_t max_enumeration_size = 16;

/// Exact E[sum_r D_r s_r] and E[sum_r D_r s_r | T = t] by visiting all 4^N
/// joint realizations of (D, T) under the product law.
inline EnumeratedExpectations enumerate_expectations(const ResearchContext& ctx,
                                                     std::span<const double> statistic) {
  const std::size_t n = ctx.size();
  if (statistic.size() != n) throw ValidationError("one statistic value per piece required");
  if (n > max_enumeration_size)
    throw ValidationError("population too large for enumeration: N_R = " + std::to_string(n) +
                          " exceeds budget " + std::to_string(max_enumeration_size));
  const std::uint64_t total = std::uint64_t{1} << (2 * n);
  double e_all = 0.0, e_joint = 0.0, p_t = 0.0;
  for (std::uint64_t code = 0; code < total; ++code) {
    double prob = 1.0, stat = 0.0;
    bool matches_t = true;
    for (std::size_t r = 0; r < n; ++r) {
      const int d = static_cast<int>((code >> (2 * r)) & 1u);
      const int tau = static_cast<int>((code >> (2 * r + 1)) & 1u);
      prob *= ctx.table(r).p(d, tau);
      if (d) stat += statistic[r];
      if (tau != ctx.t(r)) matches_t = false;
    }
    e_all += prob * stat;
    if (matches_t) {
      e_joint += prob * stat;
      p_t += prob;
    }
  }
  if (!(p_t > 0.0)) throw ValidationError("conditioning event T = t has probability 0");
  return {e_all, e_joint / p_t};
}

// ---------------------------------------------------------------------------
// Presets and files

/// Researcher collects every piece; training membership independent with
/// probability `train_prob`.
inline ResearchContext census_context(std::size_t n, double train_prob, std::uint64_t seed) {
  std::vector<SamplingTable> tables(n, SamplingTable::independent(1.0, train_prob));
  std::vector<int> t(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto rng = CounterRng::stream(seed, r, 0x7A);
    t[r] = train_prob >= 1.0 ? 1 : (train_prob <= 0.0 ? 0 : (rng.bernoulli(train_prob) ? 1 : 0));
  }
  return {std::move(tables), std::move(t)};
}

/// Researcher samples each piece with probability p, independently of training.
inline ResearchContext random_context(std::size_t n, double p, double train_prob,
                                      std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("random(p): p must lie in [0, 1]");
  std::vector<SamplingTable> tables(n, SamplingTable::independent(p, train_prob));
  std::vector<int> t(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto rng = CounterRng::stream(seed, r, 0x7A);
    t[r] = train_prob >= 1.0 ? 1 : (train_prob <= 0.0 ? 0 : (rng.bernoulli(train_prob) ? 1 : 0));
  }
  return {std::move(tables), std::move(t)};
}

/// Every piece postdates the model's training cutoff: T = 0 with certainty.
inline ResearchContext post_cutoff_context(std::size_t n, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("post_cutoff: p must lie in [0, 1]");
  return {std::vector<SamplingTable>(n, SamplingTable(1.0 - p, 0.0, p, 0.0)),
          std::vector<int>(n, 0)};
}

/// Parses a preset name: "census", "random(p)", "post_cutoff" or "post_cutoff(p)".
inline ResearchContext context_from_preset(const std::string& spec, std::size_t n,
                                           double train_prob, std::uint64_t seed) {
  auto arg = [&](const std::string& name) -> std::optional<double> {
    if (spec.rfind(name + "(", 0) != 0 || spec.back() != ')') return std::nullopt;
    const auto inner = spec.substr(name.size() + 1, spec.size() - name.size() - 2);
    auto v = io::parse_double(inner);
    if (!v) throw ValidationError("malformed preset argument in '" + spec + "'");
    return v;
  };
  if (spec == "census") return census_context(n, train_prob, seed);
  if (spec == "post_cutoff") return post_cutoff_context(n, 1.0);
  if (auto p = arg("post_cutoff")) return post_cutoff_context(n, *p);
  if (auto p = arg("random")) return random_context(n, *p, train_prob, seed);
  throw ValidationError("unknown context preset '" + spec + "'");
}

/// Context file: JSON array of {id, p00, p01, p10, p11, t}, one per population id.
inline ResearchContext context_from_json(const nlohmann::json& doc, const Population& pop) {
  if (!doc.is_array()) throw ParseError("context JSON must be an array", 0);
  std::vector<std::optional<SamplingTable>> tables(pop.size());
  std::vector<int> t(pop.size(), 0);
  std::size_t row = 0;
  for (const auto& o : doc) {
    ++row;
    try {
      const auto id = o.at("id").get<std::string>();
      auto idx = pop.index_of(id);
      if (!idx) throw ParseError("context id '" + id + "' not in population", row);
      if (tables[*idx]) throw ParseError("duplicate context id '" + id + "'", row);
      tables[*idx] = SamplingTable(o.at("p00").get<double>(), o.at("p01").get<double>(),
                                   o.at("p10").get<double>(), o.at("p11").get<double>());
      t[*idx] = o.at("t").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed context entry: ") + e.what(), row);
    }
  }
  std::vector<SamplingTable> out;
  out.reserve(pop.size());
  for (std::size_t r = 0; r < pop.size(); ++r) {
    if (!tables[r]) throw ValidationError("context lacks an entry for id '" + pop[r].id + "'");
    out.push_back(*tables[r]);
  }
  return {std::move(out), std::move(t)};
}

inline nlohmann::json context_to_json(const ResearchContext& ctx, const Population& pop) {
  auto doc = nlohmann::json::array();
  for (std::size_t r = 0; r < ctx.size(); ++r) {
    const auto& e = ctx.table(r).entries();
    doc.push_back({{"id", pop[r].id}, {"p00", e[0]}, {"p01", e[1]}, {"p10", e[2]}, {"p11", e[3]},
                   {"t", ctx.t(r)}});
  }
  return doc;
}

}  // namespace safelabel

#endif
