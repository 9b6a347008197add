#ifndef SAFELABEL_DEBIAS_HPP
#define SAFELABEL_DEBIAS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "safelabel/error.hpp"
#include "safelabel/moment.hpp"
#include "safelabel/parallel.hpp"
#include "safelabel/population.hpp"
#include "safelabel/regress.hpp"
#include "safelabel/rng.hpp"
#include "safelabel/stats.hpp"

namespace safelabel {

// ---------------------------------------------------------------------------
// Samples

enum class Arm : std::uint8_t { excluded = 0, primary = 1, validation = 2 };

/// Primary (labels only) and validation (labels and truth) index sets over a
/// population of size N_R. Built from a per-piece arm vector the sets
/// partition the population; built from row lists they may overlap or repeat
/// rows, which the census identities and the bootstrap rely on.
class Sample {
public:
  static Sample from_arms(std::span<const Arm> arms) {
    Sample s;
    s.population_size_ = arms.size();
    for (std::size_t r = 0; r < arms.size(); ++r) {
      if (arms[r] == Arm::primary) s.primary_.push_back(r);
      else if (arms[r] == Arm::validation) s.validation_.push_back(r);
    }
    return s;
  }

  static Sample from_rows(std::size_t population_size, std::vector<std::size_t> primary,
                          std::vector<std::size_t> validation) {
    Sample s;
    s.population_size_ = population_size;
    s.primary_ = std::move(primary);
    s.validation_ = std::move(validation);
    std::vector<char> seen(population_size, 0);
    for (auto* rows : {&s.primary_, &s.validation_})
      for (std::size_t r : *rows) {
        if (r >= population_size) throw ValidationError("sample row out of range");
        if (seen[r]) s.overlapping_ = true;
        seen[r] = 1;
      }
    return s;
  }

  const std::vector<std::size_t>& primary() const noexcept { return primary_; }
  const std::vector<std::size_t>& validation() const noexcept { return validation_; }
  std::size_t population_size() const noexcept { return population_size_; }
  std::size_t n_primary() const noexcept { return primary_.size(); }
  std::size_t n_validation() const noexcept { return validation_.size(); }
  std::size_t n_excluded() const noexcept {
    const std::size_t used = primary_.size() + validation_.size();
    return overlapping_ || used > population_size_ ? 0 : population_size_ - used;
  }
  double rho_p() const noexcept {
    return static_cast<double>(primary_.size()) / static_cast<double>(population_size_);
  }
  double rho_v() const noexcept {
    return static_cast<double>(validation_.size()) / static_cast<double>(population_size_);
  }
  /// True when some row sits in both arms or twice in one arm.
  bool overlapping() const noexcept { return overlapping_; }

  std::vector<Arm> arms() const {
    if (overlapping_) throw ValidationError("overlapping sample has no arm vector");
    std::vector<Arm> a(population_size_, Arm::excluded);
    for (std::size_t r : primary_) a[r] = Arm::primary;
    for (std::size_t r : validation_) a[r] = Arm::validation;
    return a;
  }

private:
  std::vector<std::size_t> primary_, validation_;
  std::size_t population_size_ = 0;
  bool overlapping_ = false;
};

/// ceil(frac * n), with products within 1e-9 of an integer rounded to it so
/// that e.g. 0.05 * 5000 gives 250 rather than 251.
inline std::size_t validation_count(std::size_t n, double frac) {
  if (!(frac > 0.0 && frac < 1.0)) throw ValidationError("validation fraction must lie in (0, 1)");
  const double x = frac * static_cast<double>(n);
  const double nearest = std::round(x);
  if (std::abs(x - nearest) <= 1e-9 * std::max(1.0, static_cast<double>(n)))
    return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(std::ceil(x));
}

/// Uniform draw of `n_sample` pieces, of which the first `n_validation` of a
/// second uniform shuffle form the validation arm.
inline Sample random_partition(std::size_t population_size, std::size_t n_sample,
                               std::size_t n_validation, std::uint64_t seed) {
  if (n_sample > population_size) throw ValidationError("sample larger than population");
  if (n_validation > n_sample) throw ValidationError("validation arm larger than sample");
  auto draw_rng = CounterRng::stream(seed, 0);
  auto drawn = sample_without_replacement(population_size, n_sample, draw_rng);
  auto split_rng = CounterRng::stream(seed, 1);
  partial_shuffle(std::span<std::size_t>(drawn), n_validation, split_rng);
  std::vector<std::size_t> validation(drawn.begin(), drawn.begin() + static_cast<std::ptrdiff_t>(n_validation));
  std::vector<std::size_t> primary(drawn.begin() + static_cast<std::ptrdiff_t>(n_validation), drawn.end());
  std::sort(validation.begin(), validation.end());
  std::sort(primary.begin(), primary.end());
  return Sample::from_rows(population_size, std::move(primary), std::move(validation));
}

/// Arms from an indicator column in the population extras: 1/true marks the
/// validation arm, 0/false the primary arm, an empty cell excludes the piece.
inline Sample sample_from_column(const Population& pop, const std::string& column) {
  std::vector<Arm> arms(pop.size(), Arm::excluded);
  for (std::size_t r = 0; r < pop.size(); ++r) {
    const auto& ex = pop[r].extras;
    auto it = ex.find(column);
    if (it == ex.end())
      throw ValidationError("validation column '" + column + "' missing on piece '" + pop[r].id + "'");
    const std::string v(io::trim(it->second));
    if (v.empty()) continue;
    if (v == "1" || v == "true" || v == "TRUE" || v == "True") arms[r] = Arm::validation;
    else if (v == "0" || v == "false" || v == "FALSE" || v == "False") arms[r] = Arm::primary;
    else throw ParseError("validation column '" + column + "' holds '" + v + "'", r + 1);
  }
  return Sample::from_arms(arms);
}

// ---------------------------------------------------------------------------
// Reports

enum class Method { plug_in, validation_only, debiased_lhs, debiased_rhs, target };
enum class VarianceSource { formula, bootstrap, hc1 };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::plug_in: return "plug_in";
    case Method::validation_only: return "validation_only";
    case Method::debiased_lhs: return "debiased_lhs";
    case Method::debiased_rhs: return "debiased_rhs";
    case Method::target: return "target";
  }
  return "?";
}

inline std::string to_string(VarianceSource v) {
  switch (v) {
    case VarianceSource::formula: return "formula";
    case VarianceSource::bootstrap: return "bootstrap";
    case VarianceSource::hc1: return "hc1";
  }
  return "?";
}

inline VarianceSource variance_source_from_string(const std::string& s) {
  if (s == "formula") return VarianceSource::formula;
  if (s == "bootstrap") return VarianceSource::bootstrap;
  if (s == "hc1") return VarianceSource::hc1;
  throw ValidationError("unknown variance source '" + s + "' (expected formula, bootstrap or hc1)");
}

struct OmegaReport {
  Side side = Side::lhs;
  double rho_p = 0.0, rho_v = 0.0;
  double sigma2_scale = 0.0;  ///< sigma^2_W (lhs) or sigma^2_V (rhs)
  double sigma2_x = 0.0, sigma2_z = 0.0, sigma_x = 0.0, sigma_z = 0.0;
  double sigma2_wv = 0.0;
  double omega_debiased = 0.0, omega_validation = 0.0;
  double margin = 0.0;
  bool more_precise_debiased = false;
};

struct EstimateReport {
  Method method = Method::plug_in;
  Side side = Side::lhs;
  std::vector<std::string> names;
  std::vector<double> coefficients;
  std::vector<double> se;
  double ci_level = 0.95;
  std::vector<Interval> ci;
  std::optional<VarianceSource> variance_source;
  std::optional<std::uint64_t> seed;
  std::size_t population_size = 0, n_primary = 0, n_validation = 0;
  bool saturated = false;
  std::optional<std::size_t> bootstrap_replications, bootstrap_failures;
  std::optional<OmegaReport> omega;
};

inline nlohmann::json to_json(const OmegaReport& o) {
  nlohmann::json j;
  j["side"] = to_string(o.side);
  j["rho_p"] = o.rho_p;
  j["rho_v"] = o.rho_v;
  j[o.side == Side::lhs ? "sigma2_w" : "sigma2_v"] = o.sigma2_scale;
  j["sigma2_x"] = o.sigma2_x;
  j["sigma2_z"] = o.sigma2_z;
  j["sigma_x"] = o.sigma_x;
  j["sigma_z"] = o.sigma_z;
  j["sigma2_wv"] = o.sigma2_wv;
  j["omega_debiased"] = o.omega_debiased;
  j["omega_validation"] = o.omega_validation;
  j["margin"] = o.margin;
  j["more_precise_debiased"] = o.more_precise_debiased;
  return j;
}

inline nlohmann::json to_json(const EstimateReport& r) {
  nlohmann::json j;
  j["method"] = to_string(r.method);
  j["side"] = to_string(r.side);
  j["names"] = r.names;
  j["coefficients"] = r.coefficients;
  j["se"] = r.se;
  j["ci_level"] = r.ci_level;
  nlohmann::json ci = nlohmann::json::array();
  for (const auto& iv : r.ci) ci.push_back({iv.lo, iv.hi});
  j["ci"] = ci;
  j["variance_source"] = r.variance_source ? nlohmann::json(to_string(*r.variance_source)) : nlohmann::json();
  j["seed"] = r.seed ? nlohmann::json(*r.seed) : nlohmann::json();
  j["population_size"] = r.population_size;
  j["n_primary"] = r.n_primary;
  j["n_validation"] = r.n_validation;
  j["saturated"] = r.saturated;
  if (r.bootstrap_replications) {
    j["bootstrap_replications"] = *r.bootstrap_replications;
    j["bootstrap_failures"] = r.bootstrap_failures.value_or(0);
  }
  if (r.omega) j["omega"] = to_json(*r.omega);
  return j;
}

// ---------------------------------------------------------------------------
// Options

struct EstimateOptions {
  std::size_t rhs_outcome = 1;
  /// Unset: formula for debiased estimators in the scalar case, bootstrap for
  /// debiased otherwise, hc1 for plug-in and validation-only.
  std::optional<VarianceSource> variance;
  double ci_level = 0.95;
  std::size_t bootstrap_reps = 1000;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

inline constexpr double gram_condition_limit = 1e12;
inline constexpr double bootstrap_failure_limit = 0.05;

// ---------------------------------------------------------------------------
// Omega formulas

struct OmegaMoments {
  double sigma2_scale = 0.0;  ///< sigma^2_W (lhs) or sigma^2_V (rhs)
  double sigma2_x = 0.0;      ///< Var(W V^) (lhs) or Var(V^ W) (rhs)
  double sigma2_z = 0.0;      ///< Var(W Delta) (lhs) or Var(Delta W) (rhs)
  double sigma2_wv = 0.0;     ///< Var(W V)
};

/// Limiting variances of the debiased and validation-only slope and the
/// precision comparison: debiased is more precise when margin >= 0, with
///   margin = (1-rho_v)/rho_v (s2_wv - s2_z) - (1-rho_p)/rho_p s2_x - 2 s_x s_z.
inline OmegaReport omega_formulas(const OmegaMoments& m, double rho_p, double rho_v, Side side) {
  if (!(rho_p > 0.0) || !(rho_v > 0.0))
    throw ValidationError("arm shares must be positive");
  if (rho_p + rho_v > 1.0 + 1e-12)
    throw ValidationError("arm shares must sum to at most 1 (overlapping arms have no formula variance)");
  for (double s : {m.sigma2_scale, m.sigma2_x, m.sigma2_z, m.sigma2_wv})
    if (!(s >= 0.0) || !std::isfinite(s)) throw NumericError("omega moments must be finite and nonnegative");
  if (!(m.sigma2_scale > 0.0)) throw NumericError("zero regressor variance in omega scale");
  OmegaReport o;
  o.side = side;
  o.rho_p = rho_p;
  o.rho_v = rho_v;
  o.sigma2_scale = m.sigma2_scale;
  o.sigma2_x = m.sigma2_x;
  o.sigma2_z = m.sigma2_z;
  o.sigma_x = std::sqrt(m.sigma2_x);
  o.sigma_z = std::sqrt(m.sigma2_z);
  o.sigma2_wv = m.sigma2_wv;
  const double fp = (1.0 - rho_p) / rho_p;
  const double fv = (1.0 - rho_v) / rho_v;
  const double inv4 = 1.0 / (m.sigma2_scale * m.sigma2_scale);
  o.omega_debiased = inv4 * (fp * m.sigma2_x + 2.0 * o.sigma_x * o.sigma_z + fv * m.sigma2_z);
  o.omega_validation = inv4 * fv * m.sigma2_wv;
  o.margin = fv * (m.sigma2_wv - m.sigma2_z) - fp * m.sigma2_x - 2.0 * o.sigma_x * o.sigma_z;
  o.more_precise_debiased = o.margin >= 0.0;
  return o;
}

namespace detail {

inline Eigen::VectorXd gather(const Eigen::VectorXd& x, std::span<const std::size_t> idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = x(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Eigen::VectorXd demeaned(const Eigen::VectorXd& x) {
  return (x.array() - x.mean()).matrix();
}

inline double var_n1(const Eigen::VectorXd& x) {
  const auto n = x.size();
  if (n < 2) return 0.0;
  return (x.array() - x.mean()).square().sum() / static_cast<double>(n - 1);
}

inline Eigen::MatrixXd cov_n1(const Eigen::MatrixXd& a) {
  const auto n = a.rows();
  if (n < 2) return Eigen::MatrixXd::Zero(a.cols(), a.cols());
  const Eigen::MatrixXd c = a.rowwise() - a.colwise().mean();
  return (c.transpose() * c) / static_cast<double>(n - 1);
}

inline Eigen::MatrixXd cross_cov_n1(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const auto n = a.rows();
  if (n < 2) return Eigen::MatrixXd::Zero(a.cols(), b.cols());
  const Eigen::MatrixXd ca = a.rowwise() - a.colwise().mean();
  const Eigen::MatrixXd cb = b.rowwise() - b.colwise().mean();
  return (ca.transpose() * cb) / static_cast<double>(n - 1);
}

/// Scalar moments for the slope on the single non-intercept regressor, after
/// demeaning (the scalar model the formulas are stated for). `x_reg` and
/// `x_lab` are the regressor and the machine-labelled quantity over the
/// combined arms; `*_v` are their validation-arm counterparts. For lhs the
/// regressor is W and the labelled quantity V^; for rhs the roles follow
/// the covariate regression.
struct ScalarColumns {
  Eigen::VectorXd scale_u;                 // variable whose mean square is the scale (union or arm 2)
  Eigen::VectorXd x_a, x_b;                // X = a * b over the union
  Eigen::VectorXd z_a, z_b;                // Z = a * b over arm 2
  Eigen::VectorXd wv_a, wv_b;              // W V over arm 2
};

inline OmegaMoments scalar_moments(const ScalarColumns& c) {
  OmegaMoments m;
  const Eigen::VectorXd s = demeaned(c.scale_u);
  m.sigma2_scale = s.squaredNorm() / static_cast<double>(s.size());
  m.sigma2_x = var_n1((demeaned(c.x_a).array() * demeaned(c.x_b).array()).matrix());
  m.sigma2_z = var_n1((demeaned(c.z_a).array() * demeaned(c.z_b).array()).matrix());
  m.sigma2_wv = var_n1((demeaned(c.wv_a).array() * demeaned(c.wv_b).array()).matrix());
  return m;
}

/// Observed columns over the two arms for one side of the regression.
struct ArmColumns {
  // lhs: design W; rhs: [1, V^] and [1, V]
  Eigen::MatrixXd x1, x2;          // regressors as the estimator sees them (labels)
  Eigen::MatrixXd x2_true;         // rhs only: [1, V] on arm 2
  Eigen::VectorXd y1, y2;          // lhs: V^; rhs: outcome
  Eigen::VectorXd v2;              // truth on arm 2 (lhs: V, rhs: V)
  Eigen::VectorXd vhat1, vhat2;    // labels
};

inline ArmColumns arm_columns(const Population& pop, std::span<const std::size_t> primary,
                              std::span<const std::size_t> validation, const std::string& labeler,
                              Side side, std::size_t rhs_outcome, bool need_primary,
                              bool need_validation) {
  ArmColumns c;
  if (need_primary) {
    c.vhat1 = label_vector(pop, labeler, primary);
    if (side == Side::lhs) {
      c.x1 = design_matrix(pop, primary);
      c.y1 = c.vhat1;
    } else {
      c.x1 = with_intercept(c.vhat1);
      c.y1 = covariate_vector(pop, rhs_outcome, primary);
    }
  }
  if (need_validation) {
    c.v2 = truth_vector(pop, validation);
    c.vhat2 = label_vector(pop, labeler, validation);
    if (side == Side::lhs) {
      c.x2 = design_matrix(pop, validation);
      c.y2 = c.vhat2;
    } else {
      c.x2 = with_intercept(c.vhat2);
      c.x2_true = with_intercept(c.v2);
      c.y2 = covariate_vector(pop, rhs_outcome, validation);
    }
  }
  return c;
}

inline void require_arm(std::size_t n, std::size_t k, const char* arm) {
  if (n < k + 1)
    throw ValidationError(std::string(arm) + " arm too small: " + std::to_string(n) +
                          " pieces for " + std::to_string(k) + " coefficients (need k+1)");
}

struct RhsSolve {
  Eigen::MatrixXd gram;
  Eigen::VectorXd coefficients;
};

inline RhsSolve rhs_solve(const ArmColumns& c) {
  const double n1 = static_cast<double>(c.x1.rows()), n2 = static_cast<double>(c.x2.rows());
  const Eigen::MatrixXd s_vv = c.x1.transpose() * c.x1 / n1;
  const Eigen::VectorXd s_vw = c.x1.transpose() * c.y1 / n1;
  const Eigen::MatrixXd l_vv =
      (c.x2.transpose() * c.x2 - c.x2_true.transpose() * c.x2_true) / n2;
  const Eigen::VectorXd l_dw = (c.x2 - c.x2_true).transpose() * c.y2 / n2;
  RhsSolve s;
  s.gram = s_vv - l_vv;
  if (!s.gram.allFinite()) throw SingularityError("corrected Gram matrix is not finite");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(s.gram);
  const auto& sv = svd.singularValues();
  const double smax = sv(0), smin = sv(sv.size() - 1);
  const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();
  if (!(cond <= gram_condition_limit))
    throw SingularityError("corrected Gram matrix is near singular (condition number " +
                           io::format_double(cond) + " above " +
                           io::format_double(gram_condition_limit) +
                           "); a larger validation share is needed");
  s.coefficients = s.gram.partialPivLu().solve(s_vw - l_dw);
  return s;
}

inline Eigen::MatrixXd stack_rows(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

inline Eigen::VectorXd stack(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out(a.size() + b.size());
  out << a, b;
  return out;
}

/// Finite-population linearization of estimator = mean_p(psi) - mean_v(phi):
///   (1/N_R) [ (1-rho_p)/rho_p S_psi + (1-rho_v)/rho_v S_phi + S_psi,phi + S_phi,psi ].
/// S_psi uses the combined arms, S_phi and the cross term the validation arm.
inline Eigen::MatrixXd design_covariance(const Eigen::MatrixXd& psi_union, const Eigen::MatrixXd& psi_v,
                                         const Eigen::MatrixXd& phi_v, double rho_p, double rho_v,
                                         double n_r) {
  const double fp = (1.0 - rho_p) / rho_p, fv = (1.0 - rho_v) / rho_v;
  const Eigen::MatrixXd cross = cross_cov_n1(psi_v, phi_v);
  Eigen::MatrixXd v = fp * cov_n1(psi_union) + fv * cov_n1(phi_v) + cross + cross.transpose();
  return v / n_r;
}

}  // namespace detail

/// Omega ingredients from the full population (truth and labels on every
/// piece). Only the scalar case (one non-intercept covariate on the lhs) is
/// defined.
inline OmegaMoments population_omega_moments(const Population& pop, const std::string& labeler,
                                             Side side, std::size_t rhs_outcome = 1) {
  const auto rows = all_rows(pop);
  const Eigen::VectorXd v = truth_vector(pop, rows);
  const Eigen::VectorXd vhat = label_vector(pop, labeler, rows);
  const Eigen::VectorXd delta = vhat - v;
  detail::ScalarColumns c;
  if (side == Side::lhs) {
    if (pop.k() != 2)
      throw UnsupportedDimensionError("omega formulas need exactly one non-intercept covariate (k=2); "
                                      "use bootstrap variance for k=" + std::to_string(pop.k()));
    const Eigen::VectorXd w = covariate_vector(pop, 1, rows);
    c = {w, w, vhat, w, delta, w, v};
  } else {
    const Eigen::VectorXd y = covariate_vector(pop, rhs_outcome, rows);
    c = {v, vhat, y, delta, y, v, y};
  }
  return detail::scalar_moments(c);
}

inline OmegaReport population_omega(const Population& pop, const std::string& labeler, Side side,
                                    double rho_p, double rho_v, std::size_t rhs_outcome = 1) {
  return omega_formulas(population_omega_moments(pop, labeler, side, rhs_outcome), rho_p, rho_v, side);
}

/// Omega ingredients estimated from a sample: the scale and X moments from
/// the combined arms (lhs) and the Z and WV moments from the validation arm.
/// On the rhs the scale sigma^2_V needs truth and comes from arm 2.
inline OmegaMoments sample_omega_moments(const Population& pop, const Sample& sample,
                                         const std::string& labeler, Side side,
                                         std::size_t rhs_outcome = 1) {
  const auto& p = sample.primary();
  const auto& q = sample.validation();
  std::vector<std::size_t> u(p);
  u.insert(u.end(), q.begin(), q.end());
  const Eigen::VectorXd vhat_u = label_vector(pop, labeler, u);
  const Eigen::VectorXd v2 = truth_vector(pop, q);
  const Eigen::VectorXd vhat2 = label_vector(pop, labeler, q);
  const Eigen::VectorXd d2 = vhat2 - v2;
  detail::ScalarColumns c;
  if (side == Side::lhs) {
    if (pop.k() != 2)
      throw UnsupportedDimensionError("omega formulas need exactly one non-intercept covariate (k=2); "
                                      "use bootstrap variance for k=" + std::to_string(pop.k()));
    const Eigen::VectorXd w_u = covariate_vector(pop, 1, u);
    const Eigen::VectorXd w2 = covariate_vector(pop, 1, q);
    c = {w_u, w_u, vhat_u, w2, d2, w2, v2};
  } else {
    const Eigen::VectorXd y_u = covariate_vector(pop, rhs_outcome, u);
    const Eigen::VectorXd y2 = covariate_vector(pop, rhs_outcome, q);
    c = {v2, vhat_u, y_u, d2, y2, v2, y2};
  }
  return detail::scalar_moments(c);
}

// ---------------------------------------------------------------------------
// Point estimates

namespace detail {

inline std::vector<std::string> coefficient_names(const Population& pop, Side side) {
  std::vector<std::string> names;
  if (side == Side::lhs)
    for (std::size_t j = 0; j < pop.k(); ++j) names.push_back("w_" + std::to_string(j));
  else
    names = {"intercept", "v"};
  return names;
}

inline std::size_t coefficient_count(const Population& pop, Side side) {
  return side == Side::lhs ? pop.k() : 2;
}

/// Point estimate only; the bootstrap and the Monte Carlo harness call this.
inline Eigen::VectorXd point_estimate(Method method, Side side, const Population& pop,
                                      std::span<const std::size_t> primary,
                                      std::span<const std::size_t> validation,
                                      const std::string& labeler, std::size_t rhs_outcome) {
  switch (method) {
    case Method::plug_in: {
      const auto c = arm_columns(pop, primary, validation, labeler, side, rhs_outcome, true, false);
      return ols_fit(c.x1, c.y1, false).coefficients;
    }
    case Method::validation_only: {
      const auto c = arm_columns(pop, primary, validation, labeler, side, rhs_outcome, false, true);
      if (side == Side::lhs) return ols_fit(c.x2, c.v2, false).coefficients;
      return ols_fit(c.x2_true, c.y2, false).coefficients;
    }
    case Method::debiased_lhs: {
      const auto c = arm_columns(pop, primary, validation, labeler, Side::lhs, rhs_outcome, true, true);
      return ols_fit(c.x1, c.y1, false).coefficients - ols_fit(c.x2, c.vhat2 - c.v2, false).coefficients;
    }
    case Method::debiased_rhs: {
      const auto c = arm_columns(pop, primary, validation, labeler, Side::rhs, rhs_outcome, true, true);
      return rhs_solve(c).coefficients;
    }
    case Method::target: break;
  }
  throw ValidationError("target has no sample estimator");
}

inline void fill_interval(EstimateReport& r) {
  const double z = stats::normal_critical(r.ci_level);
  r.ci.clear();
  for (std::size_t j = 0; j < r.coefficients.size(); ++j)
    r.ci.push_back({r.coefficients[j] - z * r.se[j], r.coefficients[j] + z * r.se[j]});
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline std::vector<double> diag_se(const Eigen::MatrixXd& cov) {
  std::vector<double> se(static_cast<std::size_t>(cov.rows()));
  for (Eigen::Index j = 0; j < cov.rows(); ++j) se[static_cast<std::size_t>(j)] = std::sqrt(std::max(0.0, cov(j, j)));
  return se;
}

inline void validate_options(const EstimateOptions& o) {
  if (!(o.ci_level > 0.0 && o.ci_level < 1.0)) throw ValidationError("ci level must lie in (0, 1)");
}

inline EstimateReport base_report(Method method, Side side, const Population& pop, const Sample& s,
                                  const EstimateOptions& o) {
  EstimateReport r;
  r.method = method;
  r.side = side;
  r.names = coefficient_names(pop, side);
  r.ci_level = o.ci_level;
  r.population_size = s.population_size();
  r.n_primary = s.n_primary();
  r.n_validation = s.n_validation();
  return r;
}

}  // namespace detail

/// Percentile bootstrap: rows are resampled with replacement independently
/// within the primary and the validation arm; replicate b draws from the
/// stream (seed, b). The point estimate is the full-sample one.
inline EstimateReport bootstrap_ci(const Population& pop, const Sample& sample, const std::string& labeler,
                                   Method method, Side side, const EstimateOptions& opts) {
  detail::validate_options(opts);
  if (opts.bootstrap_reps < 100) throw ValidationError("bootstrap needs at least 100 replications");
  if (method == Method::target) throw ValidationError("target has no sampling distribution");
  const std::size_t np = sample.n_primary(), nv = sample.n_validation();
  const std::size_t kc = detail::coefficient_count(pop, side);
  const bool uses_p = method != Method::validation_only;
  const bool uses_v = method != Method::plug_in;
  if (uses_p) detail::require_arm(np, kc, "primary");
  if (uses_v) detail::require_arm(nv, kc, "validation");

  auto report = detail::base_report(method, side, pop, sample, opts);
  report.coefficients = detail::to_std(detail::point_estimate(method, side, pop, sample.primary(),
                                                               sample.validation(), labeler, opts.rhs_outcome));
  const std::size_t b_count = opts.bootstrap_reps;
  std::vector<std::optional<Eigen::VectorXd>> reps(b_count);
  parallel_for(b_count, opts.workers, [&](std::size_t b) {
    auto rng = CounterRng::stream(opts.seed, b);
    std::vector<std::size_t> p(uses_p ? np : 0), v(uses_v ? nv : 0);
    for (auto& x : p) x = sample.primary()[rng.below(np)];
    for (auto& x : v) x = sample.validation()[rng.below(nv)];
    try {
      reps[b] = detail::point_estimate(method, side, pop, p, v, labeler, opts.rhs_outcome);
    } catch (const NumericError&) {
      reps[b].reset();
    }
  });
  std::size_t failures = 0;
  for (const auto& r : reps) failures += r ? 0 : 1;
  if (static_cast<double>(failures) > bootstrap_failure_limit * static_cast<double>(b_count))
    throw BootstrapInstabilityError("bootstrap unstable: " + std::to_string(failures) + " of " +
                                        std::to_string(b_count) + " replicates failed",
                                    failures);
  const double a = 0.5 * (1.0 - opts.ci_level);
  report.se.assign(kc, 0.0);
  report.ci.assign(kc, {});
  for (std::size_t j = 0; j < kc; ++j) {
    std::vector<double> draws;
    draws.reserve(b_count - failures);
    for (const auto& r : reps)
      if (r) draws.push_back((*r)(static_cast<Eigen::Index>(j)));
    report.se[j] = draws.size() > 1 ? stats::stddev(draws) : 0.0;
    std::sort(draws.begin(), draws.end());
    report.ci[j] = {stats::quantile_sorted(draws, a), stats::quantile_sorted(draws, 1.0 - a)};
  }
  report.variance_source = VarianceSource::bootstrap;
  report.seed = opts.seed;
  report.bootstrap_replications = b_count;
  report.bootstrap_failures = failures;
  return report;
}

/// Plug-in coefficient on the primary arm (labels substituted for truth).
inline EstimateReport plug_in(const Population& pop, const Sample& sample, const std::string& labeler,
                              Side side, const EstimateOptions& opts = {}) {
  detail::validate_options(opts);
  const auto vs = opts.variance.value_or(VarianceSource::hc1);
  if (vs == VarianceSource::formula)
    throw ValidationError("formula variance is defined for debiased and validation-only estimators");
  if (vs == VarianceSource::bootstrap) return bootstrap_ci(pop, sample, labeler, Method::plug_in, side, opts);
  const std::size_t kc = detail::coefficient_count(pop, side);
  detail::require_arm(sample.n_primary(), kc, "primary");
  const auto c = detail::arm_columns(pop, sample.primary(), sample.validation(), labeler, side,
                                     opts.rhs_outcome, true, false);
  const auto fit = ols_fit(c.x1, c.y1, true);
  auto r = detail::base_report(Method::plug_in, side, pop, sample, opts);
  r.coefficients = detail::to_std(fit.coefficients);
  r.se = detail::diag_se(fit.robust_covariance);
  r.saturated = fit.saturated;
  r.variance_source = VarianceSource::hc1;
  detail::fill_interval(r);
  return r;
}

/// Regression on the validation arm with truth (lhs: V on W; rhs: W_j on [1, V]).
/// A saturated arm (N_v = k) is allowed and flagged; its HC1 covariance is zero.
inline EstimateReport validation_only(const Population& pop, const Sample& sample, Side side,
                                      const EstimateOptions& opts = {}, const std::string& labeler = "") {
  detail::validate_options(opts);
  const auto vs = opts.variance.value_or(VarianceSource::hc1);
  if (vs == VarianceSource::bootstrap)
    return bootstrap_ci(pop, sample, labeler, Method::validation_only, side, opts);
  const std::size_t kc = detail::coefficient_count(pop, side);
  if (sample.n_validation() < kc)
    throw ValidationError("validation arm too small: " + std::to_string(sample.n_validation()) +
                          " pieces for " + std::to_string(kc) + " coefficients");
  const auto& q = sample.validation();
  const Eigen::VectorXd v2 = truth_vector(pop, q);
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  if (side == Side::lhs) {
    x = design_matrix(pop, q);
    y = v2;
  } else {
    x = with_intercept(v2);
    y = covariate_vector(pop, opts.rhs_outcome, q);
  }
  const auto fit = ols_fit(x, y, true);
  auto r = detail::base_report(Method::validation_only, side, pop, sample, opts);
  r.coefficients = detail::to_std(fit.coefficients);
  r.saturated = fit.saturated;
  if (vs == VarianceSource::hc1) {
    r.se = detail::diag_se(fit.robust_covariance);
    r.variance_source = VarianceSource::hc1;
  } else {
    // Formula: the full-sample linearization with the slope replaced by Omega.
    if (side == Side::lhs && pop.k() != 2)
      throw UnsupportedDimensionError("formula variance needs k=2; use bootstrap or hc1");
    if (sample.overlapping()) throw ValidationError("formula variance needs disjoint arms");
    const double rho_v = sample.rho_v();
    const double n_r = static_cast<double>(sample.population_size());
    const Eigen::MatrixXd a_inv = (x.transpose() * x / static_cast<double>(x.rows())).inverse();
    const Eigen::MatrixXd phi = (x.array().colwise() * fit.residuals.array()).matrix() * a_inv.transpose();
    Eigen::MatrixXd cov = (1.0 - rho_v) / rho_v * detail::cov_n1(phi) / n_r;
    // Scale from every piece whose regressor is observed (lhs: both arms),
    // W V moment from the validation arm.
    Eigen::VectorXd scale_col, a, b;
    if (side == Side::lhs) {
      std::vector<std::size_t> u(sample.primary());
      u.insert(u.end(), q.begin(), q.end());
      scale_col = covariate_vector(pop, 1, u);
      a = x.col(1);
      b = v2;
    } else {
      scale_col = v2;
      a = v2;
      b = y;
    }
    const Eigen::VectorXd sc = detail::demeaned(scale_col);
    const double s2_scale = sc.squaredNorm() / static_cast<double>(sc.size());
    const double s2_wv = detail::var_n1((detail::demeaned(a).array() * detail::demeaned(b).array()).matrix());
    if (!(s2_scale > 0.0)) throw NumericError("zero regressor variance in omega scale");
    cov(1, 1) = (1.0 - rho_v) / rho_v * s2_wv / (s2_scale * s2_scale) / n_r;
    r.se = detail::diag_se(cov);
    r.variance_source = VarianceSource::formula;
  }
  detail::fill_interval(r);
  return r;
}

namespace detail {

struct DebiasedParts {
  Eigen::VectorXd coefficients;
  Eigen::MatrixXd psi_union, psi_v, phi_v;  // influence rows
  Eigen::MatrixXd hc1;                      // robust covariance (arms treated as independent)
};

inline DebiasedParts debiased_parts(const Population& pop, const Sample& s, const std::string& labeler,
                                    Side side, std::size_t rhs_outcome) {
  const auto c = arm_columns(pop, s.primary(), s.validation(), labeler, side, rhs_outcome, true, true);
  DebiasedParts d;
  if (side == Side::lhs) {
    const auto plug = ols_fit(c.x1, c.y1, true);
    const auto err = ols_fit(c.x2, c.vhat2 - c.v2, true);
    d.coefficients = plug.coefficients - err.coefficients;
    d.hc1 = plug.robust_covariance + err.robust_covariance;
    const Eigen::MatrixXd xu = stack_rows(c.x1, c.x2);
    const Eigen::VectorXd yu = stack(c.y1, c.y2);
    const Eigen::MatrixXd a_inv = (xu.transpose() * xu / static_cast<double>(xu.rows())).inverse();
    const Eigen::VectorXd e_u = yu - xu * plug.coefficients;
    d.psi_union = (xu.array().colwise() * e_u.array()).matrix() * a_inv.transpose();
    const Eigen::VectorXd e_v = c.y2 - c.x2 * plug.coefficients;
    d.psi_v = (c.x2.array().colwise() * e_v.array()).matrix() * a_inv.transpose();
    d.phi_v = (c.x2.array().colwise() * err.residuals.array()).matrix() * a_inv.transpose();
  } else {
    const auto sol = rhs_solve(c);
    d.coefficients = sol.coefficients;
    const Eigen::MatrixXd g_inv = sol.gram.inverse();
    const Eigen::VectorXd& a = sol.coefficients;
    auto psi_of = [&](const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
      const Eigen::VectorXd e = y - x * a;
      return Eigen::MatrixXd((x.array().colwise() * e.array()).matrix() * g_inv.transpose());
    };
    d.psi_union = psi_of(stack_rows(c.x1, c.x2), stack(c.y1, c.y2));
    d.psi_v = psi_of(c.x2, c.y2);
    // phi_r = G^-1 [ (V^_r - V_r) W_r - (V^_r V^_r' - V_r V_r') a ]
    const Eigen::MatrixXd dx = c.x2 - c.x2_true;
    const Eigen::MatrixXd term = (dx.array().colwise() * c.y2.array()).matrix() -
                                 ((c.x2.array().colwise() * (c.x2 * a).array()).matrix() -
                                  (c.x2_true.array().colwise() * (c.x2_true * a).array()).matrix());
    d.phi_v = term * g_inv.transpose();
    const double n1 = static_cast<double>(c.x1.rows()), n2 = static_cast<double>(c.x2.rows());
    const double kk = static_cast<double>(a.size());
    const Eigen::MatrixXd psi1 = psi_of(c.x1, c.y1);
    d.hc1 = cov_n1(psi1) / n1 * (n1 - 1.0) / (n1 - kk) + cov_n1(d.phi_v) / n2 * (n2 - 1.0) / (n2 - kk);
  }
  return d;
}

inline EstimateReport debias(const Population& pop, const Sample& sample, const std::string& labeler,
                             Side side, const EstimateOptions& opts) {
  validate_options(opts);
  const Method method = side == Side::lhs ? Method::debiased_lhs : Method::debiased_rhs;
  const std::size_t kc = coefficient_count(pop, side);
  require_arm(sample.n_primary(), kc, "primary");
  require_arm(sample.n_validation(), kc, "validation");
  const bool scalar = side == Side::rhs || pop.k() == 2;
  const auto vs = opts.variance.value_or(scalar ? VarianceSource::formula : VarianceSource::bootstrap);
  if (vs == VarianceSource::bootstrap) return bootstrap_ci(pop, sample, labeler, method, side, opts);
  if (vs == VarianceSource::formula && !scalar)
    throw UnsupportedDimensionError("formula variance needs one non-intercept covariate (k=2), got k=" +
                                    std::to_string(pop.k()) + "; use --variance bootstrap");
  const auto parts = debiased_parts(pop, sample, labeler, side, opts.rhs_outcome);
  auto r = base_report(method, side, pop, sample, opts);
  r.coefficients = to_std(parts.coefficients);
  if (vs == VarianceSource::hc1) {
    r.se = diag_se(parts.hc1);
    r.variance_source = VarianceSource::hc1;
  } else {
    if (sample.overlapping()) throw ValidationError("formula variance needs disjoint arms");
    const auto omega = omega_formulas(sample_omega_moments(pop, sample, labeler, side, opts.rhs_outcome),
                                      sample.rho_p(), sample.rho_v(), side);
    const double n_r = static_cast<double>(sample.population_size());
    Eigen::MatrixXd cov = design_covariance(parts.psi_union, parts.psi_v, parts.phi_v, sample.rho_p(),
                                            sample.rho_v(), n_r);
    cov(1, 1) = omega.omega_debiased / n_r;
    r.se = diag_se(cov);
    r.omega = omega;
    r.variance_source = VarianceSource::formula;
  }
  fill_interval(r);
  return r;
}

}  // namespace detail

/// beta^ - lambda^: plug-in on the primary arm minus the projection of
/// Delta = V^ - V on W over the validation arm.
inline EstimateReport debias_lhs(const Population& pop, const Sample& sample, const std::string& labeler,
                                 const EstimateOptions& opts = {}) {
  return detail::debias(pop, sample, labeler, Side::lhs, opts);
}

/// Moment-corrected solve (S_V^V^ - L_V^V)^-1 (S_V^W - L_DeltaW) for the
/// regression of W_j on [1, V].
inline EstimateReport debias_rhs(const Population& pop, const Sample& sample, const std::string& labeler,
                                 const EstimateOptions& opts = {}) {
  return detail::debias(pop, sample, labeler, Side::rhs, opts);
}

/// Full-population target coefficient (no sampling variance).
inline EstimateReport target(const Population& pop, Side side, const EstimateOptions& opts = {}) {
  const auto rows = all_rows(pop);
  const Eigen::VectorXd v = truth_vector(pop, rows);
  EstimateReport r;
  r.method = Method::target;
  r.side = side;
  r.names = detail::coefficient_names(pop, side);
  r.ci_level = opts.ci_level;
  r.population_size = pop.size();
  const Eigen::VectorXd coef =
      side == Side::lhs ? ols_fit(design_matrix(pop, rows), v, false).coefficients
                        : ols_fit(with_intercept(v), covariate_vector(pop, opts.rhs_outcome, rows), false)
                              .coefficients;
  r.coefficients = detail::to_std(coef);
  r.se.assign(r.coefficients.size(), 0.0);
  detail::fill_interval(r);
  return r;
}

}  // namespace safelabel

#endif
