#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "oracle.hpp"
#include "safelabel/config.hpp"
#include "safelabel/simulate.hpp"

using namespace safelabel;

namespace {

Population sim_pop() {
  SyntheticSpec s;
  s.n_pieces = 600;
  s.beta_star = {1.0, 0.5};
  s.gamma = {0.5, -0.3};
  s.noise_sd_delta = 1.0;
  s.covariate_law = CovariateLaw::bernoulli;
  s.seed = 21;
  return generate_synthetic(s);
}

SimulationConfig small_cfg() {
  SimulationConfig c;
  c.n_sample = 300;
  c.validation_fracs = {0.1, 0.5};
  c.replications = 25;
  c.seed = 5;
  c.keep_draws = true;
  return c;
}

}  // namespace

TEST(Simulate, ReplicationsMatchHandBuiltPartitions) {
  const auto pop = sim_pop();
  const auto cfg = small_cfg();
  const auto cells = run_monte_carlo(pop, cfg);
  ASSERT_EQ(cells.size(), 2u * 3u);
  for (const auto& cell : cells) {
    const std::size_t f = cell.frac == 0.1 ? 0 : 1;
    ASSERT_EQ(cell.estimates.size(), cfg.replications);
    for (std::size_t b = 0; b < cfg.replications; ++b) {
      auto rng = CounterRng::stream(cfg.seed, b, 0);
      auto drawn = sample_without_replacement(pop.size(), cfg.n_sample, rng);
      auto split = CounterRng::stream(cfg.seed, b, 1 + f);
      partial_shuffle(std::span<std::size_t>(drawn), cell.n_validation, split);
      oracle::Mat w1, w2;
      oracle::Vec vh1, v2, d2;
      for (std::size_t i = 0; i < drawn.size(); ++i) {
        const auto& p = pop[drawn[i]];
        const double vh = p.labels.at("synthetic");
        if (i < cell.n_validation) {
          w2.push_back(p.w);
          v2.push_back(*p.v_true);
          d2.push_back(vh - *p.v_true);
        } else {
          w1.push_back(p.w);
          vh1.push_back(vh);
        }
      }
      double expected = 0;
      switch (cell.estimator) {
        case Estimator::plug_in: expected = oracle::ols(w1, vh1)[1]; break;
        case Estimator::validation_only: expected = oracle::ols(w2, v2)[1]; break;
        case Estimator::debiased: expected = oracle::ols(w1, vh1)[1] - oracle::ols(w2, d2)[1]; break;
      }
      EXPECT_NEAR(cell.estimates[b], expected, 1e-10);
    }
  }
}

TEST(Simulate, CellStatisticsFromDraws) {
  const auto pop = sim_pop();
  const auto cells = run_monte_carlo(pop, small_cfg());
  oracle::Vec w, v;
  for (const auto& p : pop.pieces()) {
    w.push_back(p.w[1]);
    v.push_back(*p.v_true);
  }
  oracle::Mat x;
  for (const auto& p : pop.pieces()) x.push_back(p.w);
  const double target = oracle::ols(x, v)[1];
  for (const auto& c : cells) {
    EXPECT_NEAR(c.target, target, 1e-10);
    const double m = oracle::mean(c.estimates);
    const double sd = std::sqrt(oracle::var(c.estimates));
    double mse = 0;
    for (double e : c.estimates) mse += (e - target) * (e - target);
    mse /= double(c.estimates.size());
    EXPECT_NEAR(c.mean_estimate, m, 1e-12);
    EXPECT_NEAR(c.sd_estimate, sd, 1e-12);
    EXPECT_NEAR(c.normalized_bias, (m - target) / sd, 1e-9);
    EXPECT_NEAR(c.mse, mse, 1e-12);
    EXPECT_TRUE(c.valid);
    EXPECT_GE(c.coverage, 0.0);
    EXPECT_LE(c.coverage, 1.0);
  }
}

TEST(Simulate, WorkerCountDoesNotChangeResults) {
  const auto pop = sim_pop();
  auto cfg = small_cfg();
  const auto a = run_monte_carlo(pop, cfg);
  cfg.workers = 4;
  const auto b = run_monte_carlo(pop, cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(to_json(a[i]), to_json(b[i]));
    EXPECT_EQ(a[i].estimates, b[i].estimates);
  }
}

TEST(Simulate, RhsCellsAndSpecNames) {
  const auto pop = sim_pop();
  auto cfg = small_cfg();
  cfg.side = Side::rhs;
  cfg.validation_fracs = {0.5};
  cfg.estimators = {Estimator::debiased};
  const auto cells = run_monte_carlo(pop, cfg);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].spec, "w_1~v");
}

TEST(Simulate, SummaryQuantilesAndCdf) {
  std::vector<SimulationCellResult> cells;
  for (int i = 0; i < 5; ++i) {
    SimulationCellResult c;
    c.estimator = Estimator::debiased;
    c.normalized_bias = i * 0.1;
    c.coverage = 0.9 + i * 0.01;
    c.mse = 5.0 - i;
    cells.push_back(c);
  }
  cells[4].valid = false;
  const auto s = summarize(cells);
  ASSERT_EQ(s.rows.size(), 1u);
  EXPECT_EQ(s.rows[0].cells, 4u);
  EXPECT_NEAR(s.rows[0].normalized_bias.median, 0.15, 1e-12);
  EXPECT_NEAR(s.rows[0].coverage.q05, 0.9 + 0.05 * 3 * 0.01, 1e-12);
  ASSERT_EQ(s.mse_cdf.size(), 1u);
  EXPECT_EQ(s.mse_cdf[0].second.front().mse, 2.0);
  EXPECT_EQ(s.mse_cdf[0].second.back().cdf, 1.0);
}

TEST(Simulate, ConfigFromJsonAndToml) {
  const auto toml = parse_toml("replications = 10\nvalidation_fracs = [0.1, 0.2]\nside = \"rhs\"\n");
  const auto cfg = simulation_config_from_json(toml);
  EXPECT_EQ(cfg.replications, 10u);
  EXPECT_EQ(cfg.validation_fracs, (std::vector<double>{0.1, 0.2}));
  EXPECT_EQ(cfg.side, Side::rhs);
  EXPECT_THROW(simulation_config_from_json({{"bogus", 1}}), ValidationError);
  EXPECT_THROW(simulation_config_from_json({{"replications", "ten"}}), ValidationError);
  const auto back = simulation_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
}

TEST(Simulate, ValidationOfConfig) {
  const auto pop = sim_pop();
  auto cfg = small_cfg();
  cfg.n_sample = 10000;
  EXPECT_THROW(run_monte_carlo(pop, cfg), ValidationError);
  cfg = small_cfg();
  cfg.validation_fracs = {1.0};
  EXPECT_THROW(run_monte_carlo(pop, cfg), ValidationError);
}

TEST(Simulate, WritesOutputs) {
  const auto pop = sim_pop();
  auto cfg = small_cfg();
  cfg.replications = 3;
  const auto cells = run_monte_carlo(pop, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "safelabel_sim_out";
  std::filesystem::remove_all(dir);
  write_simulation_outputs(dir, cells, cfg);
  const auto csv = io::read_file(dir / "cells.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + static_cast<long>(cells.size()));
  const auto summary = nlohmann::json::parse(io::read_file(dir / "summary.json"));
  EXPECT_TRUE(summary.contains("config"));
  EXPECT_TRUE(summary["summary"].contains("rows"));
  std::filesystem::remove_all(dir);
}
