#ifndef SAFELABEL_REGRESS_HPP
#define SAFELABEL_REGRESS_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "safelabel/error.hpp"
#include "safelabel/population.hpp"

namespace safelabel {

/// Relative threshold on the R diagonal of the pivoted QR below which a
/// design is declared rank deficient.
inline constexpr double rank_tolerance = 1e-10;

struct RegressionFit {
  Eigen::VectorXd coefficients;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd robust_covariance;  ///< HC1; empty unless requested
  Eigen::MatrixXd xtx_inverse;
  std::size_t n = 0;
  std::size_t k = 0;
  bool saturated = false;  ///< n == k: exact fit, HC1 reported as zero
};

/// Least squares by column-pivoted Householder QR, optionally with the HC1
/// sandwich (X'X)^-1 X' diag(e^2) X (X'X)^-1 * n / (n - k).
inline RegressionFit ols_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, bool with_hc1) {
  const auto n = x.rows(), k = x.cols();
  if (y.size() != n) throw ValidationError("ols_fit: design and response lengths differ");
  if (k == 0) throw ValidationError("ols_fit: empty design");
  if (n < k)
    throw RankError("ols_fit: fewer observations (" + std::to_string(n) + ") than columns (" +
                        std::to_string(k) + ")",
                    rank_tolerance);
  if (!x.allFinite() || !y.allFinite()) throw ValidationError("ols_fit: non-finite input");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  const Eigen::MatrixXd r = qr.matrixR().topLeftCorner(k, k).triangularView<Eigen::Upper>();
  const double largest = std::abs(r(0, 0));
  const double smallest = std::abs(r(k - 1, k - 1));
  if (!(largest > 0.0) || smallest < rank_tolerance * largest)
    throw RankError("rank-deficient design: smallest |R_ii| below " +
                        std::to_string(rank_tolerance) + " x largest",
                    rank_tolerance);

  RegressionFit fit;
  fit.n = static_cast<std::size_t>(n);
  fit.k = static_cast<std::size_t>(k);
  fit.coefficients = qr.solve(y);
  fit.residuals = y - x * fit.coefficients;

  // (X'X)^-1 = P R^-1 R^-T P'
  const Eigen::MatrixXd r_inv =
      r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(k, k));
  const Eigen::MatrixXd perm = qr.colsPermutation();
  fit.xtx_inverse = perm * (r_inv * r_inv.transpose()) * perm.transpose();

  if (with_hc1) {
    if (n == k) {
      fit.saturated = true;
      fit.robust_covariance = Eigen::MatrixXd::Zero(k, k);
    } else {
      const Eigen::MatrixXd xe = x.array().colwise() * fit.residuals.array();
      const Eigen::MatrixXd meat = xe.transpose() * xe;
      Eigen::MatrixXd cov = fit.xtx_inverse * meat * fit.xtx_inverse;
      cov *= static_cast<double>(n) / static_cast<double>(n - k);
      fit.robust_covariance = 0.5 * (cov + cov.transpose());
    }
  }
  return fit;
}

enum class Side { lhs, rhs };

inline std::string to_string(Side s) { return s == Side::lhs ? "lhs" : "rhs"; }

inline Side side_from_string(const std::string& s) {
  if (s == "lhs") return Side::lhs;
  if (s == "rhs") return Side::rhs;
  throw ValidationError("unknown side '" + s + "' (expected lhs or rhs)");
}

/// Which regression the concept enters.
///   lhs: V on W (all covariate columns).
///   rhs: W_j on (1, V) for the chosen outcome column j.
struct RegressionSpec {
  Side side = Side::lhs;
  std::size_t rhs_outcome = 1;
};

/// Regressor matrix [1, c] for the concept-as-covariate regression.
inline Eigen::MatrixXd with_intercept(const Eigen::VectorXd& c) {
  Eigen::MatrixXd m(c.size(), 2);
  m.col(0).setOnes();
  m.col(1) = c;
  return m;
}

struct PopulationTargets {
  Side side = Side::lhs;
  // lhs
  Eigen::VectorXd beta_star, beta_plugin, lambda_delta_w;
  // rhs
  Eigen::VectorXd alpha_star, alpha_plugin, lambda_eta_vhat;
  Eigen::MatrixXd lambda_v_vhat;
  double identity_residual_lhs = 0.0;
  double identity_residual_rhs = 0.0;
};

/// Full-population component regressions and the residuals of the bias
/// identities beta = beta* + lambda_{Delta|W} (lhs) and
/// alpha = lambda_{V|V^} alpha* + lambda_{eta|V^} (rhs).
inline PopulationTargets population_targets(const Population& pop, const std::string& labeler,
                                            const RegressionSpec& spec) {
  const auto rows = all_rows(pop);
  const Eigen::VectorXd v = truth_vector(pop, rows);
  const Eigen::VectorXd vhat = label_vector(pop, labeler, rows);
  PopulationTargets t;
  t.side = spec.side;
  if (spec.side == Side::lhs) {
    const Eigen::MatrixXd w = design_matrix(pop, rows);
    t.beta_star = ols_fit(w, v, false).coefficients;
    t.beta_plugin = ols_fit(w, vhat, false).coefficients;
    t.lambda_delta_w = ols_fit(w, vhat - v, false).coefficients;
    t.identity_residual_lhs =
        (t.beta_plugin - (t.beta_star + t.lambda_delta_w)).cwiseAbs().maxCoeff();
  } else {
    const Eigen::VectorXd outcome = covariate_vector(pop, spec.rhs_outcome, rows);
    const Eigen::MatrixXd vm = with_intercept(v);
    const Eigen::MatrixXd vhm = with_intercept(vhat);
    const auto target = ols_fit(vm, outcome, false);
    t.alpha_star = target.coefficients;
    const Eigen::VectorXd eta = target.residuals;  // recomputed population residual
    t.alpha_plugin = ols_fit(vhm, outcome, false).coefficients;
    t.lambda_v_vhat.resize(vm.cols(), vm.cols());
    for (Eigen::Index j = 0; j < vm.cols(); ++j)
      t.lambda_v_vhat.col(j) = ols_fit(vhm, vm.col(j), false).coefficients;
    t.lambda_eta_vhat = ols_fit(vhm, eta, false).coefficients;
    t.identity_residual_rhs =
        (t.alpha_plugin - (t.lambda_v_vhat * t.alpha_star + t.lambda_eta_vhat)).cwiseAbs().maxCoeff();
  }
  return t;
}

}  // namespace safelabel

#endif
