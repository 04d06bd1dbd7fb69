#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace cgc::alloc {

enum class Transfer { concave, linear };

/// Per-component retention budgeting problem. Retentions live on a sorted
/// grid of levels; every component's lower bound is the highest level not
/// above rho_min, and its ceiling is the highest level not above its
/// density-derived ceiling.
struct AllocationProblem {
  std::vector<std::size_t> sizes;  // weights per component
  std::vector<double> density;     // delta per component, in [0,1]
  double rho = 0.5;                // global retention target
  double rho_min = 0.2;
  double rho_max = 1.0;
  std::vector<double> grid;  // ascending levels in [0,1], containing 1.0
  Transfer transfer = Transfer::concave;
  double gamma = 2.0;

  // Levels {0, 1/steps, ..., 1}.
  static std::vector<double> uniform_grid(int steps);

  void validate() const;
  std::size_t components() const { return sizes.size(); }
  std::size_t total_size() const;
  double target_mass() const;  // rho * total_size
  // Largest single-step change of mass: max adjacent level gap times the
  // largest component size.
  double mass_slack() const;
  // Index of the highest level <= x (with a 1e-9 tolerance); -1 if none.
  int level_at_or_below(double x) const;
  int floor_level() const;
};

double transfer(double delta, Transfer kind, double gamma);

/// rho_min + (rho_max - rho_min) * phi(delta).
double budget_ceiling(double delta, const AllocationProblem& problem);

struct Allocation {
  std::string method;
  std::vector<int> levels;         // grid index per component
  std::vector<double> retention;   // grid[levels[c]]
  std::vector<double> ceilings;    // continuous ceiling per component
  std::vector<int> ceiling_levels; // highest grid index not above the ceiling
  double achieved_ratio = 0.0;     // sum(retention * size) / total size
  double mass = 0.0;               // sum(retention * size)
  bool ceilings_respected = true;
  bool budget_respected = true;    // mass <= target + slack
  bool budget_reached = true;      // |mass - target| <= slack
  std::vector<double> fitness_trace;
};

/// Density-proportional start, clipped to [floor, ceiling] and snapped down
/// to the grid, then greedy water-filling: while over budget, lower the
/// lowest-density component that can go down; then, while a one-level raise
/// still fits under the budget, raise the highest-density component below
/// its ceiling. Ties go to the lower component index.
/// Throws InfeasibleError when even the all-floor allocation exceeds the
/// budget.
Allocation cgc_l(const AllocationProblem& problem);

/// rho for every component, snapped down to the grid with the remainder
/// handed out one level at a time in component order. Ceilings are ignored.
Allocation uniform_alloc(const AllocationProblem& problem);

/// cgc_l on the mirrored map delta' = max + min - delta.
Allocation inverted_alloc(const AllocationProblem& problem);

struct EvoConfig {
  int population = 16;
  int generations = 50;
  int mutations = 2;       // level-switch attempts per offspring
  int fitness_sample = 8;  // calibration sequences used by the NLL fitness
  int elite = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

// Lower is better.
using Fitness = std::function<double(const std::vector<double>& retention)>;

/// Elitist evolutionary refinement of `init`. A level-switch mutation raises
/// one component a level and lowers another until the mass is back under
/// the budget cap; it is rejected when the raise would cross the raised
/// component's ceiling or the lowering would cross the floor. Returns the
/// best allocation ever evaluated; fitness_trace holds the best-so-far
/// fitness after initialization and after every generation.
Allocation cgc_f(const AllocationProblem& problem, const Allocation& init, const EvoConfig& evo, const Fitness& fitness,
                 const std::function<void(const Allocation&)>& on_visit = {});

// Recomputes derived fields (retention, ratio, flags) from levels.
void finalize(const AllocationProblem& problem, Allocation& a);

std::string to_json(const Allocation& a, const AllocationProblem& problem, const std::vector<std::string>& labels);
std::string trace_csv(const Allocation& a);
Allocation from_json(const std::string& text);

}  // namespace cgc::alloc
