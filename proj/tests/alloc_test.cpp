#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "cgc/alloc.hpp"
#include "cgc/error.hpp"
#include "cgc/rng.hpp"
#include "oracles.hpp"

using namespace cgc;
using namespace cgc::alloc;

namespace {

AllocationProblem problem(std::vector<std::size_t> sizes, std::vector<double> density, int steps = 16) {
  AllocationProblem p;
  p.sizes = std::move(sizes);
  p.density = std::move(density);
  p.grid = AllocationProblem::uniform_grid(steps);
  return p;
}

void expect_invariants(const AllocationProblem& p, const Allocation& a) {
  ASSERT_EQ(a.levels.size(), p.components());
  EXPECT_TRUE(a.budget_respected) << a.method;
  EXPECT_LE(a.mass, p.target_mass() + p.mass_slack() + 1e-9);
  for (std::size_t c = 0; c < a.levels.size(); ++c) {
    EXPECT_GE(a.levels[c], p.floor_level());
    EXPECT_DOUBLE_EQ(a.retention[c], p.grid[static_cast<std::size_t>(a.levels[c])]);
  }
}

// Separable toy fitness with a known optimum on the grid.
double toy_fitness(const std::vector<double>& xi) {
  const double a[3] = {1.0, 3.0, 2.0};
  double f = 0.0;
  for (std::size_t c = 0; c < xi.size(); ++c) f += a[c] * (1.0 - xi[c]) * (1.0 - xi[c]);
  return f;
}

}  // namespace

TEST(Ceiling, EndpointsAndHandValue) {
  AllocationProblem p;
  EXPECT_DOUBLE_EQ(budget_ceiling(0.0, p), 0.2);
  EXPECT_DOUBLE_EQ(budget_ceiling(1.0, p), 1.0);
  EXPECT_DOUBLE_EQ(budget_ceiling(0.25, p), 0.6);
  p.transfer = Transfer::linear;
  EXPECT_DOUBLE_EQ(budget_ceiling(0.25, p), 0.4);
  EXPECT_DOUBLE_EQ(transfer(0.49, Transfer::concave, 2.0), 0.7);
}

TEST(Problem, GridHelpers) {
  const auto g = AllocationProblem::uniform_grid(4);
  EXPECT_EQ(g, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
  auto p = problem({10, 30}, {0.5, 0.5}, 4);
  EXPECT_EQ(p.total_size(), 40u);
  EXPECT_DOUBLE_EQ(p.target_mass(), 20.0);
  EXPECT_DOUBLE_EQ(p.mass_slack(), 7.5);
  EXPECT_EQ(p.level_at_or_below(0.6), 2);
  EXPECT_EQ(p.level_at_or_below(0.5 - 1e-12), 2);
  EXPECT_EQ(p.floor_level(), 0);
  p.rho_min = 0.3;
  EXPECT_EQ(p.floor_level(), 1);
}

TEST(Problem, ValidationRejectsBadInput) {
  auto p = problem({10}, {0.5, 0.5});
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = problem({10}, {1.5});
  EXPECT_THROW(p.validate(), InvalidArgument);
  p = problem({10}, {0.5});
  p.grid = {0.0, 0.5};
  EXPECT_THROW(p.validate(), InvalidArgument);
}

TEST(CgcL, TwoComponentHandExample) {
  auto p = problem({100, 100}, {1.0, 0.25}, 20);
  const auto a = cgc_l(p);
  EXPECT_NEAR(a.retention[0], 0.8, 1e-12);
  EXPECT_NEAR(a.retention[1], 0.2, 1e-12);
  EXPECT_DOUBLE_EQ(a.ceilings[1], 0.6);
  EXPECT_TRUE(a.ceilings_respected);
  EXPECT_TRUE(a.budget_reached);

  const auto inv = inverted_alloc(p);
  EXPECT_NEAR(inv.retention[0], 0.2, 1e-12);
  EXPECT_NEAR(inv.retention[1], 0.8, 1e-12);
  EXPECT_EQ(inv.method, "inverted");
}

TEST(CgcL, TwoComponentMatchesBruteForce) {
  auto p = problem({100, 100}, {1.0, 0.25}, 20);
  const auto a = cgc_l(p);
  // Brute force: highest mass not above target, then closest to the
  // density-proportional split.
  const double sd = p.density[0] + p.density[1];
  const double want0 = 2.0 * p.rho * p.density[0] / sd, want1 = 2.0 * p.rho * p.density[1] / sd;
  const auto pts = oracle::feasible_grid(p.grid, p.sizes, p.floor_level(), a.ceiling_levels, p.target_mass() + 1e-9,
                                         [&](const std::vector<double>& x) {
                                           return (x[0] - want0) * (x[0] - want0) + (x[1] - want1) * (x[1] - want1);
                                         });
  ASSERT_FALSE(pts.empty());
  const oracle::GridPoint* best = nullptr;
  double best_mass = -1.0;
  for (const auto& g : pts) {
    const double m = 100.0 * (p.grid[static_cast<std::size_t>(g.levels[0])] + p.grid[static_cast<std::size_t>(g.levels[1])]);
    if (m > best_mass + 1e-9 || (std::fabs(m - best_mass) <= 1e-9 && g.fitness < best->fitness)) {
      best = &g;
      best_mass = m;
    }
  }
  EXPECT_EQ(a.levels, best->levels);
}

TEST(CgcL, ConstantMapEqualsUniform) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng.below(10);
    std::vector<std::size_t> sizes(k);
    for (auto& s : sizes) s = 16 + rng.below(200);
    const double d = 0.3 + 0.7 * rng.uniform();
    auto p = problem(sizes, std::vector<double>(k, d), 16);
    const auto l = cgc_l(p), u = uniform_alloc(p), inv = inverted_alloc(p);
    EXPECT_EQ(l.levels, u.levels);
    EXPECT_EQ(inv.levels, u.levels);
  }
}

TEST(CgcL, SingleComponentIsRhoCappedByCeiling) {
  auto p = problem({64}, {1.0});
  EXPECT_DOUBLE_EQ(cgc_l(p).retention[0], 0.5);
  p.density = {0.0};
  EXPECT_DOUBLE_EQ(cgc_l(p).retention[0], 0.1875);
}

TEST(CgcL, ZeroDensityStaysAtFloor) {
  auto p = problem({10, 10}, {0.0, 0.0});
  const auto a = cgc_l(p);
  EXPECT_EQ(a.retention, (std::vector<double>{0.1875, 0.1875}));
  EXPECT_FALSE(a.budget_reached);
}

TEST(CgcL, MassWithinOneStepOnRandomProblems) {
  Rng rng(7);
  int checked = 0;
  while (checked < 500) {
    const std::size_t k = 1 + rng.below(32);
    std::vector<std::size_t> sizes(k);
    std::vector<double> dens(k);
    for (auto& s : sizes) s = 1 + rng.below(512);
    for (auto& d : dens) d = rng.uniform();
    auto p = problem(sizes, dens, 4 + static_cast<int>(rng.below(30)));
    p.rho = 0.2 + 0.7 * rng.uniform();
    double reachable = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const int lvl = std::max(p.level_at_or_below(budget_ceiling(dens[c], p)), p.floor_level());
      reachable += p.grid[static_cast<std::size_t>(lvl)] * static_cast<double>(sizes[c]);
    }
    if (reachable < p.target_mass()) continue;
    ++checked;
    for (const auto& a : {cgc_l(p), uniform_alloc(p)}) {
      expect_invariants(p, a);
      EXPECT_TRUE(a.budget_reached) << a.method << " mass " << a.mass << " target " << p.target_mass();
    }
    const auto l = cgc_l(p);
    EXPECT_TRUE(l.ceilings_respected);
    for (std::size_t c = 0; c < k; ++c) EXPECT_LE(l.levels[c], l.ceiling_levels[c]);
  }
}

TEST(CgcL, TargetBelowFloorIsRejected) {
  auto p = problem({10, 10}, {0.5, 0.9});
  p.rho = 0.1;
  EXPECT_THROW(cgc_l(p), InvalidArgument);
}

TEST(Uniform, HalfRetention) {
  auto p = problem({64, 64, 64}, {0.1, 0.5, 0.9});
  const auto a = uniform_alloc(p);
  EXPECT_EQ(a.retention, (std::vector<double>{0.5, 0.5, 0.5}));
  EXPECT_DOUBLE_EQ(a.mass, 96.0);
}

TEST(Allocation, JsonRoundTrip) {
  auto p = problem({10, 20}, {0.3, 0.9});
  const auto a = cgc_l(p);
  const auto back = from_json(to_json(a, p, {"L0H0", "L0H1"}));
  EXPECT_EQ(back.levels, a.levels);
  EXPECT_EQ(back.retention, a.retention);
  EXPECT_EQ(back.method, "cgc-l");
}

class CgcFToy : public ::testing::Test {
 protected:
  AllocationProblem p = problem({64, 64, 64}, {0.9, 0.5, 0.1}, 16);
};

TEST_F(CgcFToy, ZeroGenerationsReturnsInit) {
  const auto init = cgc_l(p);
  EvoConfig evo;
  evo.generations = 0;
  const auto a = cgc_f(p, init, evo, toy_fitness);
  EXPECT_EQ(a.levels, init.levels);
  EXPECT_EQ(a.method, "cgc-f");
  EXPECT_EQ(a.fitness_trace.size(), 1u);
}

TEST_F(CgcFToy, ConstantFitnessKeepsInit) {
  const auto init = cgc_l(p);
  EvoConfig evo;
  evo.generations = 10;
  const auto a = cgc_f(p, init, evo, [](const std::vector<double>&) { return 1.0; });
  EXPECT_EQ(a.levels, init.levels);
}

TEST_F(CgcFToy, ReachesExhaustiveOptimumAndStaysFeasible) {
  const auto init = cgc_l(p);
  const auto pts = oracle::feasible_grid(p.grid, p.sizes, p.floor_level(), init.ceiling_levels,
                                         std::max(p.target_mass(), init.mass) + 1e-9, toy_fitness);
  double optimum = std::numeric_limits<double>::infinity();
  for (const auto& g : pts) optimum = std::min(optimum, g.fitness);

  int hits = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EvoConfig evo;
    evo.seed = seed;
    bool feasible = true;
    const auto a = cgc_f(p, init, evo, toy_fitness, [&](const Allocation& v) {
      feasible = feasible && v.ceilings_respected && v.budget_respected;
    });
    EXPECT_TRUE(feasible);
    ASSERT_EQ(a.fitness_trace.size(), static_cast<std::size_t>(evo.generations) + 2);
    for (std::size_t i = 1; i < a.fitness_trace.size(); ++i) EXPECT_LE(a.fitness_trace[i], a.fitness_trace[i - 1]);
    EXPECT_DOUBLE_EQ(a.fitness_trace.back(), toy_fitness(a.retention));
    hits += std::fabs(a.fitness_trace.back() - optimum) < 1e-12;
  }
  EXPECT_GE(hits, 4);
}

TEST_F(CgcFToy, Deterministic) {
  const auto init = cgc_l(p);
  EvoConfig evo;
  evo.seed = 3;
  evo.generations = 20;
  const auto a = cgc_f(p, init, evo, toy_fitness), b = cgc_f(p, init, evo, toy_fitness);
  EXPECT_EQ(a.levels, b.levels);
  EXPECT_EQ(a.fitness_trace, b.fitness_trace);
  EXPECT_NE(trace_csv(a).find("generation,best_fitness"), std::string::npos);
}

TEST_F(CgcFToy, RejectsInitOverCeiling) {
  auto init = cgc_l(p);
  init.levels[2] = 16;
  EXPECT_THROW(cgc_f(p, init, EvoConfig{}, toy_fitness), InvalidArgument);
}
