#include "cgc/redsim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cgc/error.hpp"
#include "cgc/rng.hpp"
#include "json.hpp"

namespace cgc::redsim {

using nlohmann::json;

namespace {

// Per-feature coordinate energies (squared unit-direction entries).
std::vector<std::vector<double>> energies(const SyntheticComponent& comp) {
  std::vector<std::vector<double>> e(comp.directions.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    const auto& v = comp.directions[i];
    double norm2 = 0.0;
    for (double x : v) norm2 += x * x;
    for (double x : v) e[i].push_back(x * x / norm2);
  }
  return e;
}

std::vector<double> weights(const SyntheticComponent& comp, Weighting w) {
  if (w == Weighting::uniform_count) return std::vector<double>(comp.p.size(), 1.0);
  return comp.p;
}

// Weighted destroyed fraction for one removal set.
double destroyed_fraction(const std::vector<std::vector<double>>& e, const std::vector<double>& w,
                          const std::vector<int>& removed, int n_removed, double eta) {
  double hit = 0.0, total = 0.0;
  for (std::size_t f = 0; f < e.size(); ++f) {
    double frac = 0.0;
    for (int i = 0; i < n_removed; ++i) frac += e[f][static_cast<std::size_t>(removed[static_cast<std::size_t>(i)])];
    if (frac > eta) hit += w[f];
    total += w[f];
  }
  return total > 0.0 ? hit / total : 0.0;
}

Estimate mean_and_se(const std::vector<double>& x) {
  Estimate e;
  const auto n = static_cast<double>(x.size());
  e.mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  if (x.size() > 1) {
    double ss = 0.0;
    for (double v : x) ss += (v - e.mean) * (v - e.mean);
    e.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
  return e;
}

json estimate_json(const Estimate& e) { return {{"mean", e.mean}, {"stderr", e.stderr_}}; }

}  // namespace

void SyntheticComponent::validate() const {
  if (d < 1 || f < 1) throw InvalidArgument("component needs d >= 1 and F >= 1");
  if (directions.size() != static_cast<std::size_t>(f) || p.size() != static_cast<std::size_t>(f))
    throw InvalidArgument("one direction and one frequency per feature");
  for (const auto& v : directions) {
    if (v.size() != static_cast<std::size_t>(d)) throw InvalidArgument("direction length must equal d");
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    if (std::fabs(n2 - 1.0) > 1e-9) throw InvalidArgument("directions must be unit-norm");
  }
  for (double x : p)
    if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("frequencies must lie in [0,1]");
}

void DestructionParams::validate() const {
  if (!(s >= 0.0 && s <= 1.0)) throw InvalidArgument("prune fraction must lie in [0,1]");
  if (!(eta > 0.0 && eta < 1.0)) throw InvalidArgument("energy threshold must lie in (0,1)");
  if (trials < 1) throw InvalidArgument("need at least one trial");
}

std::vector<double> zipf_frequencies(int f, double zipf_exponent) {
  if (f < 1) throw InvalidArgument("F must be >= 1");
  if (!(zipf_exponent >= 0.0)) throw InvalidArgument("zipf exponent must be >= 0");
  std::vector<double> p;
  for (int i = 1; i <= f; ++i) p.push_back(std::pow(static_cast<double>(i), -zipf_exponent));
  return p;  // p[0] = 1 is already the maximum
}

double activation_entropy(const std::vector<double>& p) {
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= (x / total) * std::log(x / total);
  return h;
}

double normalized_entropy(const std::vector<double>& p) {
  if (p.size() <= 1) return 0.0;
  return activation_entropy(p) / std::log(static_cast<double>(p.size()));
}

int removed_count(double s, int d) { return static_cast<int>(std::floor(s * d + 1e-9)); }

SyntheticComponent gen_component(int d, int f, double zipf_exponent, std::uint64_t seed, DirectionModel model) {
  if (d < 1) throw InvalidArgument("d must be >= 1");
  SyntheticComponent c;
  c.d = d;
  c.f = f;
  c.zipf_exponent = zipf_exponent;
  c.seed = seed;
  c.p = zipf_frequencies(f, zipf_exponent);
  int support = d;
  if (model == DirectionModel::entropy_coupled) {
    support = std::clamp(static_cast<int>(std::lround(normalized_entropy(c.p) * d)), 1, d);
  }
  Rng rng(derive_seed(seed, 0));
  std::vector<int> coords(static_cast<std::size_t>(d));
  for (int i = 0; i < f; ++i) {
    std::vector<double> v(static_cast<std::size_t>(d), 0.0);
    std::iota(coords.begin(), coords.end(), 0);
    // Partial Fisher-Yates picks the support.
    for (int j = 0; j < support; ++j) {
      const auto pick = static_cast<std::size_t>(j) + rng.below(static_cast<std::uint64_t>(d - j));
      std::swap(coords[static_cast<std::size_t>(j)], coords[pick]);
    }
    double n2 = 0.0;
    while (n2 == 0.0) {
      for (int j = 0; j < support; ++j) {
        const double x = rng.normal();
        v[static_cast<std::size_t>(coords[static_cast<std::size_t>(j)])] = x;
        n2 += x * x;
      }
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
    c.directions.push_back(std::move(v));
  }
  return c;
}

Estimate expected_destruction(const SyntheticComponent& comp, const DestructionParams& params) {
  params.validate();
  const auto e = energies(comp);
  const auto w = weights(comp, params.weighting);
  const int n_removed = removed_count(params.s, comp.d);
  std::vector<double> per_trial;
  per_trial.reserve(static_cast<std::size_t>(params.trials));
  std::vector<int> order(static_cast<std::size_t>(comp.d));
  for (int t = 0; t < params.trials; ++t) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(t)));
    rng.shuffle(order.begin(), order.end());
    per_trial.push_back(destroyed_fraction(e, w, order, n_removed, params.eta));
  }
  return mean_and_se(per_trial);
}

double exact_destruction(const SyntheticComponent& comp, double s, double eta, Weighting weighting) {
  if (comp.d > 20) throw InvalidArgument("exact enumeration limited to d <= 20");
  const auto e = energies(comp);
  const auto w = weights(comp, weighting);
  const int k = removed_count(s, comp.d);
  std::vector<int> subset(static_cast<std::size_t>(k));
  std::iota(subset.begin(), subset.end(), 0);
  double sum = 0.0;
  std::size_t count = 0;
  for (;;) {
    sum += destroyed_fraction(e, w, subset, k, eta);
    ++count;
    int i = k - 1;
    while (i >= 0 && subset[static_cast<std::size_t>(i)] == comp.d - k + i) --i;
    if (i < 0) break;
    ++subset[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j) subset[static_cast<std::size_t>(j)] = subset[static_cast<std::size_t>(j - 1)] + 1;
  }
  return sum / static_cast<double>(count);
}

double zipf_for_normalized_entropy(int f, double target) {
  if (!(target > 0.0 && target <= 1.0)) throw InvalidArgument("target normalized entropy must lie in (0,1]");
  if (f < 2) throw InvalidArgument("need F >= 2 to set an entropy");
  if (target >= 1.0) return 0.0;
  double lo = 0.0, hi = 1.0;
  while (normalized_entropy(zipf_frequencies(f, hi)) > target) {
    hi *= 2.0;
    if (hi > 1e6) throw InvalidArgument("target entropy unreachable");
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (normalized_entropy(zipf_frequencies(f, mid)) > target) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

Theorem1Report theorem1_experiment(const Theorem1Config& config) {
  config.params.validate();
  if (config.zipf_levels.empty()) throw InvalidArgument("need at least one entropy level");
  Theorem1Report r;
  r.d = config.d;
  r.f = config.f;
  r.s = config.params.s;
  r.eta = config.params.eta;
  r.trials = config.params.trials;
  r.zipf_levels = config.zipf_levels;
  std::vector<SyntheticComponent> comps;
  for (std::size_t i = 0; i < config.zipf_levels.size(); ++i) {
    comps.push_back(gen_component(config.d, config.f, config.zipf_levels[i], derive_seed(config.seed, i), config.model));
    r.entropies.push_back(activation_entropy(comps.back().p));
    r.destruction.push_back(expected_destruction(comps.back(), config.params));
  }
  std::vector<double> means;
  for (const auto& e : r.destruction) means.push_back(e.mean);
  const auto distinct = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return std::unique(v.begin(), v.end()) - v.begin();
  };
  r.testable = config.zipf_levels.size() >= 3 && distinct(r.entropies) >= 2 && distinct(means) >= 2;
  if (r.testable) r.correlation = stats::spearman(r.entropies, means);

  for (std::size_t i = 0; i < comps.size(); ++i) {
    std::vector<double> etas = config.eta_sweep;
    if (std::find(etas.begin(), etas.end(), config.params.eta) == etas.end()) etas.push_back(config.params.eta);
    std::sort(etas.begin(), etas.end());
    std::vector<std::vector<double>> grid(etas.size());
    for (std::size_t a = 0; a < etas.size(); ++a) {
      for (double s : config.s_grid) {
        DestructionParams p = config.params;
        p.s = s;
        p.eta = etas[a];
        const auto est = expected_destruction(comps[i], p);
        r.curve.push_back({config.zipf_levels[i], r.entropies[i], s, etas[a], est});
        grid[a].push_back(est.mean);
      }
      for (std::size_t b = 1; b < grid[a].size(); ++b)
        if (config.s_grid[b] >= config.s_grid[b - 1] && grid[a][b] < grid[a][b - 1]) r.monotone_in_s = false;
    }
    for (std::size_t a = 1; a < etas.size(); ++a)
      for (std::size_t b = 0; b < config.s_grid.size(); ++b)
        if (grid[a][b] > grid[a - 1][b]) r.monotone_in_eta = false;
  }
  return r;
}

Theorem2Report theorem2_experiment(const Theorem2Config& config) {
  config.params.validate();
  std::vector<double> targets = config.entropy_targets;
  if (targets.empty()) {
    if (config.k < 1) throw InvalidArgument("need at least one component");
    for (int c = 0; c < config.k; ++c) {
      const double t = config.k == 1 ? 0.0 : static_cast<double>(c) / (config.k - 1);
      targets.push_back(config.entropy_low + t * (config.entropy_high - config.entropy_low));
    }
  }
  const std::size_t k = targets.size();
  Theorem2Report r;
  std::vector<SyntheticComponent> comps;
  for (std::size_t c = 0; c < k; ++c) {
    const double z = zipf_for_normalized_entropy(config.f, targets[c]);
    comps.push_back(gen_component(config.d, config.f, z, derive_seed(config.seed, c), config.model));
    r.entropies.push_back(std::clamp(normalized_entropy(comps.back().p), 0.0, 1.0));
  }

  alloc::AllocationProblem problem = config.problem_template;
  problem.sizes.assign(k, static_cast<std::size_t>(config.d));
  problem.density = r.entropies;
  problem.rho = config.rho;
  if (problem.grid.empty()) problem.grid = alloc::AllocationProblem::uniform_grid(16);
  const auto cgc = alloc::cgc_l(problem);
  const auto uni = alloc::uniform_alloc(problem);
  r.retention_cgc = cgc.retention;
  r.retention_uniform = uni.retention;
  r.identical_allocations = cgc.levels == uni.levels;

  double sum_c = 0.0, sum_u = 0.0, var_c = 0.0, var_u = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    DestructionParams p = config.params;
    p.seed = derive_seed(config.params.seed, c);  // same removal draws in both arms
    p.s = 1.0 - cgc.retention[c];
    r.per_component_cgc.push_back(expected_destruction(comps[c], p));
    p.s = 1.0 - uni.retention[c];
    r.per_component_uniform.push_back(expected_destruction(comps[c], p));
    sum_c += r.per_component_cgc.back().mean;
    sum_u += r.per_component_uniform.back().mean;
    var_c += std::pow(r.per_component_cgc.back().stderr_, 2);
    var_u += std::pow(r.per_component_uniform.back().stderr_, 2);
  }
  const auto kd = static_cast<double>(k);
  r.aggregate_cgc = {sum_c / kd, std::sqrt(var_c) / kd};
  r.aggregate_uniform = {sum_u / kd, std::sqrt(var_u) / kd};
  r.difference = r.aggregate_uniform.mean - r.aggregate_cgc.mean;
  r.difference_se = std::hypot(r.aggregate_cgc.stderr_, r.aggregate_uniform.stderr_);
  return r;
}

std::string to_json(const Theorem1Report& r) {
  json levels = json::array();
  for (std::size_t i = 0; i < r.zipf_levels.size(); ++i) {
    levels.push_back({{"zipf", r.zipf_levels[i]}, {"entropy", r.entropies[i]}, {"destruction", estimate_json(r.destruction[i])}});
  }
  json out = {{"d", r.d},
              {"F", r.f},
              {"s", r.s},
              {"eta", r.eta},
              {"trials", r.trials},
              {"levels", levels},
              {"testable", r.testable},
              {"monotone_in_s", r.monotone_in_s},
              {"monotone_in_eta", r.monotone_in_eta}};
  if (r.testable) out["correlation"] = json::parse(stats::to_json(r.correlation));
  else out["correlation"] = "untestable: fewer than three distinct entropy levels";
  return out.dump(2) + "\n";
}

std::string to_json(const Theorem2Report& r) {
  json comps = json::array();
  for (std::size_t c = 0; c < r.entropies.size(); ++c) {
    comps.push_back({{"normalized_entropy", r.entropies[c]},
                     {"retention_cgc_l", r.retention_cgc[c]},
                     {"retention_uniform", r.retention_uniform[c]},
                     {"destruction_cgc_l", estimate_json(r.per_component_cgc[c])},
                     {"destruction_uniform", estimate_json(r.per_component_uniform[c])}});
  }
  const json out = {{"components", comps},
                    {"aggregate_cgc_l", estimate_json(r.aggregate_cgc)},
                    {"aggregate_uniform", estimate_json(r.aggregate_uniform)},
                    {"difference", r.difference},
                    {"difference_se", r.difference_se},
                    {"identical_allocations", r.identical_allocations}};
  return out.dump(2) + "\n";
}

std::string curve_csv(const Theorem1Report& r) {
  std::ostringstream os;
  os.precision(10);
  os << "zipf,entropy,s,eta,destruction,stderr\n";
  for (const auto& p : r.curve)
    os << p.zipf << ',' << p.entropy << ',' << p.s << ',' << p.eta << ',' << p.destruction.mean << ','
       << p.destruction.stderr_ << '\n';
  return os.str();
}

}  // namespace cgc::redsim
