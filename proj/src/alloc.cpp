#include "cgc/alloc.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "cgc/error.hpp"
#include "cgc/rng.hpp"
#include "json.hpp"

namespace cgc::alloc {

using nlohmann::json;

namespace {

constexpr double kSnapTol = 1e-9;

double mass_of(const AllocationProblem& p, const std::vector<int>& levels) {
  double m = 0.0;
  for (std::size_t c = 0; c < levels.size(); ++c)
    m += p.grid[static_cast<std::size_t>(levels[c])] * static_cast<double>(p.sizes[c]);
  return m;
}

double step_mass(const AllocationProblem& p, std::size_t c, int from, int to) {
  return (p.grid[static_cast<std::size_t>(to)] - p.grid[static_cast<std::size_t>(from)]) * static_cast<double>(p.sizes[c]);
}

std::vector<int> ceiling_levels_for(const AllocationProblem& p, const std::vector<double>& ceilings) {
  std::vector<int> out;
  for (double c : ceilings) out.push_back(std::max(p.level_at_or_below(c), p.floor_level()));
  return out;
}

// Greedy water-filling toward the target mass. `priority` orders which
// component moves first (higher raises first, lower drops first).
void water_fill(const AllocationProblem& p, const std::vector<double>& priority, const std::vector<int>& upper,
                std::vector<int>& levels) {
  const int lower = p.floor_level();
  const double target = p.target_mass();
  const double tol = kSnapTol * std::max(1.0, target);
  double mass = mass_of(p, levels);
  while (mass > target + tol) {
    std::size_t best = levels.size();
    for (std::size_t c = 0; c < levels.size(); ++c) {
      if (levels[c] <= lower) continue;
      if (best == levels.size() || priority[c] < priority[best]) best = c;
    }
    if (best == levels.size()) throw InfeasibleError("budget below the sum of per-component floors");
    mass += step_mass(p, best, levels[best], levels[best] - 1);
    --levels[best];
  }
  for (;;) {
    std::size_t best = levels.size();
    for (std::size_t c = 0; c < levels.size(); ++c) {
      if (levels[c] >= upper[c]) continue;
      if (mass + step_mass(p, c, levels[c], levels[c] + 1) > target + tol) continue;
      if (best == levels.size() || priority[c] > priority[best]) best = c;
    }
    if (best == levels.size()) break;
    mass += step_mass(p, best, levels[best], levels[best] + 1);
    ++levels[best];
  }
}

void check_floor_feasible(const AllocationProblem& p) {
  const double floor_mass = p.grid[static_cast<std::size_t>(p.floor_level())] * static_cast<double>(p.total_size());
  if (floor_mass > p.target_mass() * (1.0 + kSnapTol)) {
    throw InfeasibleError("infeasible: target retention is below the sum of per-component grid minima");
  }
}

Allocation cgc_l_with(const AllocationProblem& p, const std::vector<double>& density, const std::string& method) {
  p.validate();
  check_floor_feasible(p);
  const std::size_t k = p.components();
  Allocation a;
  a.method = method;
  for (double d : density) a.ceilings.push_back(budget_ceiling(d, p));
  a.ceiling_levels = ceiling_levels_for(p, a.ceilings);

  double weighted = 0.0;
  for (std::size_t c = 0; c < k; ++c) weighted += density[c] * static_cast<double>(p.sizes[c]);
  const auto total = static_cast<double>(p.total_size());
  const int lower = p.floor_level();
  a.levels.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    // rho * w_c * |theta| / sum_c' w_c' |theta_c'|, with w = delta / mean(delta);
    // the mean cancels. An all-zero map falls back to equal weights.
    const double start = weighted > 0.0 ? p.rho * density[c] * total / weighted : p.rho;
    const double clipped = std::min(start, a.ceilings[c]);
    a.levels[c] = std::clamp(p.level_at_or_below(clipped), lower, a.ceiling_levels[c]);
  }
  water_fill(p, density, a.ceiling_levels, a.levels);
  finalize(p, a);
  return a;
}

}  // namespace

std::vector<double> AllocationProblem::uniform_grid(int steps) {
  if (steps < 1) throw InvalidArgument("grid needs at least one step");
  std::vector<double> g;
  for (int i = 0; i <= steps; ++i) g.push_back(static_cast<double>(i) / steps);
  return g;
}

void AllocationProblem::validate() const {
  if (sizes.empty() || sizes.size() != density.size()) throw InvalidArgument("one size and one density per component");
  for (auto s : sizes)
    if (s == 0) throw InvalidArgument("component sizes must be positive");
  for (double d : density)
    if (!(d >= 0.0 && d <= 1.0)) throw InvalidArgument("densities must lie in [0,1]");
  if (!(rho_min >= 0.0 && rho_min < rho_max && rho_max <= 1.0)) throw InvalidArgument("need 0 <= rho_min < rho_max <= 1");
  if (!(rho > rho_min && rho < rho_max)) throw InvalidArgument("rho must lie in (rho_min, rho_max)");
  if (grid.size() < 2 || !std::is_sorted(grid.begin(), grid.end()) ||
      std::adjacent_find(grid.begin(), grid.end()) != grid.end()) {
    throw InvalidArgument("grid must be strictly ascending with at least two levels");
  }
  if (grid.front() < 0.0 || grid.back() != 1.0) throw InvalidArgument("grid must lie in [0,1] and contain 1.0");
  if (grid.front() > rho_min + kSnapTol) throw InvalidArgument("grid needs a level at or below rho_min");
  if (!(gamma >= 1.0)) throw InvalidArgument("gamma must be >= 1");
}

std::size_t AllocationProblem::total_size() const { return std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}); }

double AllocationProblem::target_mass() const { return rho * static_cast<double>(total_size()); }

double AllocationProblem::mass_slack() const {
  double gap = 0.0;
  for (std::size_t i = 1; i < grid.size(); ++i) gap = std::max(gap, grid[i] - grid[i - 1]);
  return gap * static_cast<double>(*std::max_element(sizes.begin(), sizes.end()));
}

int AllocationProblem::level_at_or_below(double x) const {
  const auto it = std::upper_bound(grid.begin(), grid.end(), x + kSnapTol);
  return static_cast<int>(it - grid.begin()) - 1;
}

int AllocationProblem::floor_level() const { return std::max(0, level_at_or_below(rho_min)); }

double transfer(double delta, Transfer kind, double gamma) {
  return kind == Transfer::linear ? delta : std::pow(delta, 1.0 / gamma);
}

double budget_ceiling(double delta, const AllocationProblem& problem) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw InvalidArgument("density must lie in [0,1]");
  const double phi = transfer(delta, problem.transfer, problem.gamma);
  return problem.rho_min * (1.0 - phi) + problem.rho_max * phi;
}

void finalize(const AllocationProblem& p, Allocation& a) {
  a.retention.clear();
  for (int l : a.levels) a.retention.push_back(p.grid[static_cast<std::size_t>(l)]);
  a.mass = mass_of(p, a.levels);
  a.achieved_ratio = a.mass / static_cast<double>(p.total_size());
  if (a.ceilings.empty()) {
    for (double d : p.density) a.ceilings.push_back(budget_ceiling(d, p));
    a.ceiling_levels = ceiling_levels_for(p, a.ceilings);
  }
  a.ceilings_respected = true;
  for (std::size_t c = 0; c < a.levels.size(); ++c) a.ceilings_respected &= a.levels[c] <= a.ceiling_levels[c];
  const double tol = kSnapTol * std::max(1.0, p.target_mass());
  a.budget_respected = a.mass <= p.target_mass() + p.mass_slack() + tol;
  a.budget_reached = std::fabs(a.mass - p.target_mass()) <= p.mass_slack() + tol;
}

Allocation cgc_l(const AllocationProblem& problem) { return cgc_l_with(problem, problem.density, "cgc-l"); }

Allocation uniform_alloc(const AllocationProblem& problem) {
  problem.validate();
  const std::size_t k = problem.components();
  Allocation a;
  a.method = "uniform";
  const int base = std::max(0, problem.level_at_or_below(problem.rho));
  a.levels.assign(k, base);
  // Equal priority: leftover mass goes to lower component indices first.
  const std::vector<double> flat(k, 0.0);
  const std::vector<int> top(k, static_cast<int>(problem.grid.size()) - 1);
  water_fill(problem, flat, top, a.levels);
  finalize(problem, a);
  return a;
}

Allocation inverted_alloc(const AllocationProblem& problem) {
  problem.validate();
  const auto [lo, hi] = std::minmax_element(problem.density.begin(), problem.density.end());
  std::vector<double> mirrored;
  for (double d : problem.density) mirrored.push_back(std::clamp(*hi + *lo - d, 0.0, 1.0));
  AllocationProblem flipped = problem;
  flipped.density = mirrored;
  Allocation a = cgc_l_with(flipped, mirrored, "inverted");
  return a;
}

void EvoConfig::validate() const {
  if (population < 2) throw InvalidArgument("population must be >= 2");
  if (elite < 1 || elite > population) throw InvalidArgument("elite must be in [1, population]");
  if (generations < 0 || mutations < 1) throw InvalidArgument("bad evolutionary search settings");
}

Allocation cgc_f(const AllocationProblem& problem, const Allocation& init, const EvoConfig& evo, const Fitness& fitness,
                 const std::function<void(const Allocation&)>& on_visit) {
  problem.validate();
  evo.validate();
  const std::size_t k = problem.components();
  if (init.levels.size() != k) throw InvalidArgument("initial allocation does not match the problem");

  Allocation base = init;
  base.method = "cgc-f";
  base.ceilings.clear();
  finalize(problem, base);
  if (!base.ceilings_respected) throw InvalidArgument("initial allocation violates a ceiling");
  const std::vector<int> upper = base.ceiling_levels;
  const int lower = problem.floor_level();
  const double tol = kSnapTol * std::max(1.0, problem.target_mass());
  const double cap = std::max(problem.target_mass(), base.mass) + tol;

  std::map<std::vector<int>, double> cache;
  auto evaluate = [&](const std::vector<int>& levels) {
    if (auto it = cache.find(levels); it != cache.end()) return it->second;
    Allocation cand = base;
    cand.levels = levels;
    finalize(problem, cand);
    if (on_visit) on_visit(cand);
    const double f = fitness(cand.retention);
    cache.emplace(levels, f);
    return f;
  };

  const double init_fitness = evaluate(base.levels);
  base.fitness_trace = {init_fitness};
  if (evo.generations == 0 || k < 2) {
    return base;
  }

  Rng rng(evo.seed);
  auto mutate = [&](std::vector<int> levels) {
    for (int m = 0; m < evo.mutations; ++m) {
      const auto a = static_cast<std::size_t>(rng.below(k));
      auto b = static_cast<std::size_t>(rng.below(k - 1));
      if (b >= a) ++b;
      if (levels[a] + 1 > upper[a]) continue;
      std::vector<int> next = levels;
      ++next[a];
      double mass = mass_of(problem, next);
      bool ok = true;
      while (mass > cap) {
        if (next[b] - 1 < lower) {
          ok = false;
          break;
        }
        mass += step_mass(problem, b, next[b], next[b] - 1);
        --next[b];
      }
      if (ok) levels = std::move(next);
    }
    return levels;
  };

  struct Individual {
    std::vector<int> levels;
    double fitness;
  };
  auto ranked = [](const Individual& x, const Individual& y) {
    return x.fitness < y.fitness || (x.fitness == y.fitness && x.levels < y.levels);
  };

  std::vector<Individual> population{{base.levels, init_fitness}};
  while (static_cast<int>(population.size()) < evo.population) {
    auto child = mutate(base.levels);
    population.push_back({child, evaluate(child)});
  }
  Individual best{base.levels, init_fitness};
  auto track_best = [&]() {
    for (const auto& ind : population)
      if (ind.fitness < best.fitness) best = ind;
  };
  track_best();
  base.fitness_trace.push_back(best.fitness);

  for (int gen = 0; gen < evo.generations; ++gen) {
    std::sort(population.begin(), population.end(), ranked);
    std::vector<Individual> next(population.begin(), population.begin() + evo.elite);
    while (static_cast<int>(next.size()) < evo.population) {
      // Binary tournament.
      const auto& p1 = population[rng.below(population.size())];
      const auto& p2 = population[rng.below(population.size())];
      const auto& parent = ranked(p1, p2) ? p1 : p2;
      auto child = mutate(parent.levels);
      next.push_back({child, evaluate(child)});
    }
    population = std::move(next);
    track_best();
    base.fitness_trace.push_back(best.fitness);
  }

  Allocation out = base;
  out.levels = best.levels;
  finalize(problem, out);
  return out;
}

std::string to_json(const Allocation& a, const AllocationProblem& problem, const std::vector<std::string>& labels) {
  json comps = json::array();
  for (std::size_t c = 0; c < a.levels.size(); ++c) {
    comps.push_back({{"component", c < labels.size() ? labels[c] : std::to_string(c)},
                     {"retention", a.retention[c]},
                     {"level", a.levels[c]},
                     {"ceiling", a.ceilings[c]},
                     {"ceiling_level", a.ceiling_levels[c]},
                     {"density", problem.density[c]},
                     {"size", problem.sizes[c]}});
  }
  const json params = {{"rho", problem.rho},
                       {"rho_min", problem.rho_min},
                       {"rho_max", problem.rho_max},
                       {"grid", problem.grid},
                       {"transfer", problem.transfer == Transfer::concave ? "concave" : "linear"},
                       {"gamma", problem.gamma}};
  const json out = {{"method", a.method},
                    {"params", params},
                    {"components", comps},
                    {"achieved_ratio", a.achieved_ratio},
                    {"mass", a.mass},
                    {"target_mass", problem.target_mass()},
                    {"mass_slack", problem.mass_slack()},
                    {"ceilings_respected", a.ceilings_respected},
                    {"budget_respected", a.budget_respected},
                    {"budget_reached", a.budget_reached},
                    {"fitness_trace", a.fitness_trace}};
  return out.dump(2) + "\n";
}

std::string trace_csv(const Allocation& a) {
  std::ostringstream os;
  os.precision(17);
  os << "generation,best_fitness\n";
  for (std::size_t g = 0; g < a.fitness_trace.size(); ++g) os << g << ',' << a.fitness_trace[g] << '\n';
  return os.str();
}

Allocation from_json(const std::string& text) {
  Allocation a;
  try {
    const auto j = json::parse(text);
    a.method = j.at("method");
    for (const auto& c : j.at("components")) {
      a.levels.push_back(c.at("level"));
      a.retention.push_back(c.at("retention"));
      a.ceilings.push_back(c.at("ceiling"));
      a.ceiling_levels.push_back(c.at("ceiling_level"));
    }
    a.achieved_ratio = j.at("achieved_ratio");
    a.mass = j.at("mass");
    a.ceilings_respected = j.at("ceilings_respected");
    a.budget_respected = j.at("budget_respected");
    a.budget_reached = j.at("budget_reached");
    a.fitness_trace = j.at("fitness_trace").get<std::vector<double>>();
  } catch (const std::exception& e) {
    throw ArtifactError(std::string("malformed allocation: ") + e.what());
  }
  return a;
}

}  // namespace cgc::alloc
