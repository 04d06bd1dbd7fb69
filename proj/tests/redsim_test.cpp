#include <gtest/gtest.h>

#include <cmath>

#include "cgc/error.hpp"
#include "cgc/redsim.hpp"
#include "oracles.hpp"

using namespace cgc;
using namespace cgc::redsim;

namespace {

SyntheticComponent handmade(std::vector<std::vector<double>> dirs, std::vector<double> p) {
  SyntheticComponent c;
  c.d = static_cast<int>(dirs[0].size());
  c.f = static_cast<int>(dirs.size());
  c.directions = std::move(dirs);
  c.p = std::move(p);
  return c;
}

}  // namespace

TEST(Zipf, FrequenciesAndEntropy) {
  const auto flat = zipf_frequencies(8, 0.0);
  for (double p : flat) EXPECT_EQ(p, 1.0);
  EXPECT_NEAR(activation_entropy(flat), std::log(8.0), 1e-14);
  EXPECT_NEAR(normalized_entropy(flat), 1.0, 1e-14);
  const auto z = zipf_frequencies(4, 1.0);
  EXPECT_DOUBLE_EQ(z[0], 1.0);
  EXPECT_DOUBLE_EQ(z[3], 0.25);
  EXPECT_EQ(normalized_entropy({1.0}), 0.0);
  EXPECT_EQ(activation_entropy({1.0, 0.0, 0.0}), 0.0);
}

TEST(Zipf, ExponentSearchHitsTarget) {
  for (double target : {0.2, 0.5, 0.8, 0.99}) {
    const double a = zipf_for_normalized_entropy(128, target);
    EXPECT_NEAR(normalized_entropy(zipf_frequencies(128, a)), target, 1e-6);
  }
  EXPECT_EQ(zipf_for_normalized_entropy(128, 1.0), 0.0);
}

TEST(RemovedCount, Floors) {
  EXPECT_EQ(removed_count(0.0, 64), 0);
  EXPECT_EQ(removed_count(1.0, 64), 64);
  EXPECT_EQ(removed_count(0.5, 3), 1);
  EXPECT_EQ(removed_count(1.0 / 3.0, 3), 1);
}

TEST(Generate, UnitDirectionsAndDeterminism) {
  for (auto model : {DirectionModel::isotropic, DirectionModel::entropy_coupled}) {
    const auto a = gen_component(16, 24, 1.0, 5, model);
    const auto b = gen_component(16, 24, 1.0, 5, model);
    EXPECT_EQ(a.directions, b.directions);
    ASSERT_EQ(a.directions.size(), 24u);
    for (const auto& v : a.directions) {
      double n = 0.0;
      for (double x : v) n += x * x;
      EXPECT_NEAR(n, 1.0, 1e-12);
    }
    EXPECT_NO_THROW(a.validate());
  }
}

TEST(Generate, PinnedSmallComponent) {
  const auto c = gen_component(3, 2, 0.0, 11, DirectionModel::isotropic);
  EXPECT_EQ(c.d, 3);
  EXPECT_EQ(c.f, 2);
  EXPECT_EQ(c.p, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(c.directions, gen_component(3, 2, 0.0, 11, DirectionModel::isotropic).directions);
  EXPECT_NE(c.directions, gen_component(3, 2, 0.0, 12, DirectionModel::isotropic).directions);
}

TEST(Destruction, Endpoints) {
  const auto c = gen_component(32, 40, 1.0, 2);
  DestructionParams p;
  p.trials = 50;
  p.s = 0.0;
  EXPECT_EQ(expected_destruction(c, p).mean, 0.0);
  p.s = 1.0;
  EXPECT_EQ(expected_destruction(c, p).mean, 1.0);
}

TEST(Destruction, AxisAlignedDirectionHandExpectation) {
  const auto c = handmade({{1.0, 0.0, 0.0}}, {1.0});
  EXPECT_NEAR(exact_destruction(c, 1.0 / 3.0, 0.5), 1.0 / 3.0, 1e-15);
  DestructionParams p;
  p.s = 1.0 / 3.0;
  p.trials = 30000;
  const auto e = expected_destruction(c, p);
  EXPECT_NEAR(e.mean, 1.0 / 3.0, 4.0 * e.stderr_);
}

TEST(Destruction, ExactMatchesBitmaskOracle) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto c = gen_component(10, 12, 1.2, seed);
    for (double s : {0.2, 0.5, 0.7})
      for (double eta : {0.25, 0.5}) {
        const double want = oracle::destruction(c.directions, c.p, removed_count(s, c.d), eta);
        EXPECT_NEAR(exact_destruction(c, s, eta), want, 1e-12);
      }
  }
}

TEST(Destruction, MonteCarloAgreesWithExact) {
  const auto c = gen_component(12, 20, 1.0, 4);
  DestructionParams p;
  p.trials = 4000;
  p.seed = 9;
  const auto e = expected_destruction(c, p);
  EXPECT_NEAR(e.mean, exact_destruction(c, p.s, p.eta), 4.0 * e.stderr_ + 1e-12);
  p.weighting = Weighting::uniform_count;
  const auto u = expected_destruction(c, p);
  EXPECT_NEAR(u.mean, exact_destruction(c, p.s, p.eta, Weighting::uniform_count), 4.0 * u.stderr_ + 1e-12);
}

TEST(Destruction, MonotoneInSAndEta) {
  const auto c = gen_component(32, 64, 1.0, 3);
  DestructionParams p;
  p.trials = 300;
  double prev = -1.0;
  for (double s : {0.0, 0.2, 0.4, 0.6, 0.8, 1.0}) {
    p.s = s;
    const double m = expected_destruction(c, p).mean;
    EXPECT_GE(m, prev);
    prev = m;
  }
  p.s = 0.5;
  prev = 2.0;
  for (double eta : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    p.eta = eta;
    const double m = expected_destruction(c, p).mean;
    EXPECT_LE(m, prev);
    prev = m;
  }
}

TEST(Destruction, ParamsValidate) {
  DestructionParams p;
  p.s = 1.5;
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = DestructionParams{};
  p.trials = 0;
  EXPECT_THROW(p.validate(), InvalidArgument);
  EXPECT_THROW(exact_destruction(gen_component(24, 4, 0.0, 1), 0.5, 0.5), InvalidArgument);
}

TEST(Theorem1, SingleLevelIsUntestable) {
  Theorem1Config cfg;
  cfg.d = 16;
  cfg.f = 16;
  cfg.zipf_levels = {1.0};
  cfg.params.trials = 20;
  const auto r = theorem1_experiment(cfg);
  EXPECT_FALSE(r.testable);
  EXPECT_EQ(r.destruction.size(), 1u);
}

TEST(Theorem1, SmallRunIsMonotoneAndSerializes) {
  Theorem1Config cfg;
  cfg.d = 16;
  cfg.f = 32;
  cfg.params.trials = 100;
  const auto r = theorem1_experiment(cfg);
  EXPECT_TRUE(r.testable);
  EXPECT_TRUE(r.monotone_in_s);
  EXPECT_TRUE(r.monotone_in_eta);
  EXPECT_EQ(r.curve.size(), cfg.zipf_levels.size() * cfg.s_grid.size() * cfg.eta_sweep.size());
  EXPECT_NE(curve_csv(r).find("zipf"), std::string::npos);
  EXPECT_NE(to_json(r).find("correlation"), std::string::npos);
}

TEST(Theorem2, SingleComponentAllocationsIdentical) {
  Theorem2Config cfg;
  cfg.k = 1;
  cfg.d = 16;
  cfg.f = 16;
  cfg.params.trials = 50;
  const auto r = theorem2_experiment(cfg);
  EXPECT_TRUE(r.identical_allocations);
  EXPECT_EQ(r.difference, 0.0);
}

TEST(Theorem2, ConstantEntropyControlHasZeroDifference) {
  Theorem2Config cfg;
  cfg.k = 4;
  cfg.d = 16;
  cfg.f = 32;
  cfg.entropy_targets.assign(4, 0.6);
  cfg.params.trials = 100;
  const auto r = theorem2_experiment(cfg);
  EXPECT_TRUE(r.identical_allocations);
  EXPECT_EQ(r.difference, 0.0);
  EXPECT_EQ(r.retention_cgc, r.retention_uniform);
  EXPECT_NE(to_json(r).find("difference"), std::string::npos);
}
