#include <gtest/gtest.h>

#include "oracle.hpp"
#include "safelabel/regress.hpp"

using namespace safelabel;

namespace {

struct Data {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
  oracle::Mat xo;
  oracle::Vec yo;
};

Data make_data(std::size_t n, std::size_t k, std::uint64_t seed) {
  auto rng = CounterRng::stream(seed);
  Data d;
  d.x.resize(n, k);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    oracle::Vec row(k);
    for (std::size_t j = 0; j < k; ++j) row[j] = d.x(i, j) = j == 0 ? 1.0 : rng.normal();
    d.y(i) = 0.3 + row.back() * 1.7 + (1.0 + std::abs(row.back())) * rng.normal();
    d.xo.push_back(row);
    d.yo.push_back(d.y(i));
  }
  return d;
}

}  // namespace

TEST(Regress, OlsAndHc1MatchNormalEquations) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto d = make_data(50 + 10 * s, 1 + s % 4, s);
    const auto fit = ols_fit(d.x, d.y, true);
    const auto b = oracle::ols(d.xo, d.yo);
    const auto v = oracle::hc1(d.xo, d.yo);
    for (std::size_t i = 0; i < b.size(); ++i) {
      EXPECT_NEAR(fit.coefficients(i), b[i], 1e-10);
      for (std::size_t j = 0; j < b.size(); ++j) EXPECT_NEAR(fit.robust_covariance(i, j), v[i][j], 1e-10);
    }
    EXPECT_FALSE(fit.saturated);
    EXPECT_NEAR(fit.residuals.sum(), 0.0, 1e-9);  // intercept in every design
  }
}

TEST(Regress, SaturatedFitIsExactWithZeroHc1) {
  Eigen::MatrixXd x(2, 2);
  x << 1, 0, 1, 2;
  Eigen::VectorXd y(2);
  y << 3, 7;
  const auto fit = ols_fit(x, y, true);
  EXPECT_TRUE(fit.saturated);
  EXPECT_NEAR(fit.coefficients(0), 3.0, 1e-12);
  EXPECT_NEAR(fit.coefficients(1), 2.0, 1e-12);
  EXPECT_EQ(fit.robust_covariance.norm(), 0.0);
}

TEST(Regress, RankErrors) {
  Eigen::MatrixXd x(4, 2);
  x << 1, 2, 1, 2, 1, 2, 1, 2;
  Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(4, 0, 3);
  EXPECT_THROW(ols_fit(x, y, false), RankError);
  Eigen::MatrixXd wide(1, 2);
  wide << 1, 2;
  EXPECT_THROW(ols_fit(wide, Eigen::VectorXd::Ones(1), false), RankError);
}

TEST(Regress, SideParsing) {
  EXPECT_EQ(side_from_string("lhs"), Side::lhs);
  EXPECT_EQ(side_from_string("rhs"), Side::rhs);
  EXPECT_THROW(side_from_string("middle"), ValidationError);
}

TEST(Regress, LhsTargetsAgainstOracle) {
  SyntheticSpec s;
  s.n_pieces = 300;
  s.beta_star = {1.0, 0.5, -0.2};
  s.gamma = {0.4, -0.3, 0.2};
  s.seed = 3;
  const auto pop = generate_synthetic(s);
  oracle::Mat x;
  oracle::Vec v, vh, d;
  for (const auto& p : pop.pieces()) {
    x.push_back(p.w);
    v.push_back(*p.v_true);
    vh.push_back(p.labels.at("synthetic"));
    d.push_back(vh.back() - v.back());
  }
  const auto t = population_targets(pop, "synthetic", {Side::lhs, 1});
  const auto bs = oracle::ols(x, v), bp = oracle::ols(x, vh), ld = oracle::ols(x, d);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(t.beta_star(j), bs[j], 1e-10);
    EXPECT_NEAR(t.beta_plugin(j), bp[j], 1e-10);
    EXPECT_NEAR(t.lambda_delta_w(j), ld[j], 1e-10);
  }
  EXPECT_LE(t.identity_residual_lhs, 1e-12);
}

TEST(Regress, RhsIdentityAndAttenuation) {
  SyntheticSpec s;
  s.n_pieces = 5000;
  s.beta_star = {0.0, 1.0};
  s.gamma = {0.0, 0.0};
  s.noise_sd_v = 1.0;
  s.noise_sd_delta = 1.0;
  s.seed = 8;
  const auto pop = generate_synthetic(s);
  const auto t = population_targets(pop, "synthetic", {Side::rhs, 1});
  EXPECT_LE(t.identity_residual_rhs, 1e-10);
  // Classical measurement error: slope shrinks by Var(V) / (Var(V) + 1) ~ 2/3.
  EXPECT_NEAR(t.alpha_plugin(1) / t.alpha_star(1), 2.0 / 3.0, 0.05);
}
