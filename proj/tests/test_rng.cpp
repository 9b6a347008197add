#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "safelabel/parallel.hpp"
#include "safelabel/rng.hpp"
#include "safelabel/stats.hpp"

using namespace safelabel;

TEST(Rng, StreamsAreReproducibleAndPathSensitive) {
  auto a = CounterRng::stream(7, 1, 2);
  auto b = CounterRng::stream(7, 1, 2);
  auto c = CounterRng::stream(7, 2, 1);
  for (int i = 0; i < 100; ++i) {
    const auto x = a();
    EXPECT_EQ(x, b());
    EXPECT_NE(x, c());
  }
}

TEST(Rng, SplitMixKnownOutput) {
  // Reference SplitMix64 (Vigna) with state 0: first output.
  std::uint64_t state = 0;
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  CounterRng rng(0);
  EXPECT_EQ(rng(), z);
  EXPECT_EQ(z, 0xE220A8397B1DCDAFULL);
}

TEST(Rng, BelowStaysInRangeAndIsRoughlyUniform) {
  auto rng = CounterRng::stream(3);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const auto x = rng.below(7);
    ASSERT_LT(x, 7u);
    ++counts[x];
  }
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 5 * std::sqrt(n / 7.0));
}

TEST(Rng, NormalMoments) {
  auto rng = CounterRng::stream(5);
  std::vector<double> xs(200000);
  for (auto& x : xs) x = rng.normal();
  EXPECT_NEAR(stats::mean(xs), 0.0, 0.01);
  EXPECT_NEAR(stats::variance(xs), 1.0, 0.015);
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
  auto rng = CounterRng::stream(9);
  const auto s = sample_without_replacement(100, 40, rng);
  ASSERT_EQ(s.size(), 40u);
  std::set<std::size_t> u(s.begin(), s.end());
  EXPECT_EQ(u.size(), 40u);
  EXPECT_LT(*u.rbegin(), 100u);
}

TEST(Rng, PartialShuffleInclusionFrequency) {
  // Each element should land in the first m slots with probability m/n.
  const std::size_t n = 10, m = 3, reps = 30000;
  std::vector<int> hits(n, 0);
  for (std::size_t r = 0; r < reps; ++r) {
    auto rng = CounterRng::stream(11, r);
    auto s = sample_without_replacement(n, m, rng);
    for (auto i : s) ++hits[i];
  }
  const double p = double(m) / n, sd = std::sqrt(reps * p * (1 - p));
  for (int h : hits) EXPECT_NEAR(h, reps * p, 5 * sd);
}

TEST(Parallel, SlotWritesAreScheduleIndependent) {
  std::vector<std::uint64_t> serial(500), parallel(500);
  auto body = [](std::vector<std::uint64_t>& out) {
    return [&out](std::size_t i) {
      auto rng = CounterRng::stream(1, i);
      out[i] = rng();
    };
  };
  parallel_for(500, 1, body(serial));
  parallel_for(500, 4, body(parallel));
  EXPECT_EQ(serial, parallel);
}

TEST(Parallel, RethrowsFirstError) {
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 4) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(Stats, QuantileType7MatchesHandComputation) {
  std::vector<double> xs{5, 1, 4, 2, 3};
  EXPECT_DOUBLE_EQ(stats::quantile(xs, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(stats::quantile(xs, 0.1), 1.4);
  EXPECT_DOUBLE_EQ(stats::quantile(xs, 0.975), 4.9);
  EXPECT_DOUBLE_EQ(stats::quantile(xs, 0.0), 1.0);
}

TEST(Stats, NormalCritical) {
  EXPECT_NEAR(stats::normal_critical(0.95), 1.959963984540054, 1e-12);
  EXPECT_NEAR(stats::normal_quantile(0.5), 0.0, 1e-15);
}

TEST(Stats, SampleVarianceUsesNMinusOne) {
  std::vector<double> xs{1, 2, 3, 4};
  EXPECT_DOUBLE_EQ(stats::variance(xs), 5.0 / 3.0);
  std::vector<double> ys{2, 4, 6, 8};
  EXPECT_DOUBLE_EQ(stats::covariance(xs, ys), 10.0 / 3.0);
}
