#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cgc/error.hpp"
#include "cgc/rng.hpp"
#include "cgc/stats.hpp"
#include "oracles.hpp"

using namespace cgc;
using namespace cgc::stats;

TEST(Ranks, TiesAreAveraged) {
  const std::vector<double> x{10, 20, 20, 5};
  EXPECT_EQ(fractional_ranks(x), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Pearson, PerfectAndAntiCorrelation) {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 4, 6, 8, 10}, z{5, 4, 3, 2, 1};
  EXPECT_NEAR(pearson(x, y).coefficient, 1.0, 1e-15);
  EXPECT_NEAR(pearson(x, z).coefficient, -1.0, 1e-15);
  EXPECT_EQ(pearson(x, y).p_value, 0.0);
}

TEST(Spearman, MonotoneNonlinearIsOne) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6}, y{1, 8, 27, 64, 125, 216};
  EXPECT_NEAR(spearman(x, y).coefficient, 1.0, 1e-15);
  EXPECT_LT(pearson(x, y).coefficient, 1.0);
}

TEST(Correlation, MatchesOracles) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(30);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::round(rng.normal() * 3.0);
      y[i] = 0.5 * x[i] + rng.normal();
    }
    if (*std::min_element(x.begin(), x.end()) == *std::max_element(x.begin(), x.end())) continue;
    EXPECT_NEAR(pearson(x, y).coefficient, oracle::pearson_r(x, y), 1e-12);
    EXPECT_NEAR(spearman(x, y).coefficient, oracle::spearman_r(x, y), 1e-12);
  }
}

TEST(PValue, TApproximationKnownValue) {
  // r = 0.5, n = 12: t = 0.5 * sqrt(10 / 0.75) = 1.8257, two-sided p ~ 0.0979.
  EXPECT_NEAR(t_test_p_value(0.5, 12), 0.0979, 1e-4);
  EXPECT_NEAR(t_test_p_value(0.0, 12), 1.0, 1e-12);
  EXPECT_NEAR(t_test_p_value(-0.5, 12), t_test_p_value(0.5, 12), 1e-15);
}

TEST(PValue, PermutationMatchesEnumerationOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 4 + rng.below(4);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = x[i] + rng.normal();
    }
    EXPECT_NEAR(pearson(x, y, PValueMode::permutation).p_value, oracle::permutation_p(x, y, false), 1e-12);
    EXPECT_NEAR(spearman(x, y, PValueMode::permutation).p_value, oracle::permutation_p(x, y, true), 1e-12);
  }
  std::vector<double> big(11, 0.0);
  for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<double>(i);
  EXPECT_THROW(pearson(big, big, PValueMode::permutation), InvalidArgument);
}

TEST(Correlation, RejectsDegenerateInput) {
  const std::vector<double> a{1, 2, 3}, flat{1, 1, 1}, two{1, 2};
  EXPECT_THROW(pearson(a, flat), InvalidArgument);
  EXPECT_THROW(pearson(two, two), InvalidArgument);
  EXPECT_THROW(spearman(a, two), InvalidArgument);
}

TEST(Correlation, JsonHasFields) {
  const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
  const auto j = to_json(spearman(x, y));
  EXPECT_NE(j.find("spearman"), std::string::npos);
  EXPECT_NE(j.find("p_value"), std::string::npos);
}
