#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cgc/alloc.hpp"
#include "cgc/stats.hpp"

namespace cgc::redsim {

enum class DirectionModel {
  isotropic,        // every direction uniform on the full sphere
  entropy_coupled,  // support size grows with the component's normalized entropy
};

enum class Weighting { activity, uniform_count };

struct SyntheticComponent {
  int d = 0;
  int f = 0;
  std::vector<std::vector<double>> directions;  // f unit vectors of length d
  std::vector<double> p;                        // activation frequencies, max 1
  double zipf_exponent = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DestructionParams {
  double s = 0.5;    // pruned fraction of coordinates
  double eta = 0.5;  // energy threshold
  int trials = 2000;
  std::uint64_t seed = 0;
  Weighting weighting = Weighting::activity;

  void validate() const;
};

struct Estimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

// p_f proportional to f^-zipf (f = 1..F), normalized so the largest is 1.
std::vector<double> zipf_frequencies(int f, double zipf_exponent);

// Shannon entropy (nats) of p / sum(p).
double activation_entropy(const std::vector<double>& p);
// Entropy divided by ln F; 0 when F = 1.
double normalized_entropy(const std::vector<double>& p);

// Number of removed coordinates for prune fraction s.
int removed_count(double s, int d);

SyntheticComponent gen_component(int d, int f, double zipf_exponent, std::uint64_t seed,
                                 DirectionModel model = DirectionModel::isotropic);

/// Monte-Carlo estimate over seeded trials. Each trial draws one random
/// ordering of the coordinates and removes its first removed_count(s, d)
/// entries, so estimates are nested across s for a fixed seed.
Estimate expected_destruction(const SyntheticComponent& comp, const DestructionParams& params);

// Exact expectation over every removal subset of the right size; d <= 20.
double exact_destruction(const SyntheticComponent& comp, double s, double eta,
                         Weighting weighting = Weighting::activity);

// Exponent whose frequency profile has the given normalized entropy.
double zipf_for_normalized_entropy(int f, double target);

struct CurvePoint {
  double zipf = 0.0;
  double entropy = 0.0;
  double s = 0.0;
  double eta = 0.0;
  Estimate destruction;
};

struct Theorem1Report {
  int d = 0;
  int f = 0;
  double s = 0.0;
  double eta = 0.0;
  int trials = 0;
  std::vector<double> zipf_levels;
  std::vector<double> entropies;
  std::vector<Estimate> destruction;  // at (s, eta), one per level
  bool testable = false;
  stats::CorrelationResult correlation;
  std::vector<CurvePoint> curve;      // s grid and eta sweep, all levels
  bool monotone_in_s = true;
  bool monotone_in_eta = true;
};

struct Theorem1Config {
  int d = 64;
  int f = 128;
  std::vector<double> zipf_levels{0.0, 0.5, 1.0, 1.5, 2.5};
  DestructionParams params{};
  DirectionModel model = DirectionModel::isotropic;
  std::vector<double> s_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> eta_sweep{0.25, 0.5, 0.75};
  std::uint64_t seed = 0;
};

Theorem1Report theorem1_experiment(const Theorem1Config& config);

struct Theorem2Config {
  int k = 8;
  int d = 64;
  int f = 128;
  double rho = 0.5;
  // Normalized entropy targets per component; empty spreads k values evenly
  // over [entropy_low, entropy_high].
  std::vector<double> entropy_targets;
  double entropy_low = 0.2;
  double entropy_high = 1.0;
  alloc::AllocationProblem problem_template{};  // rho_min, rho_max, grid, transfer
  DestructionParams params{};
  DirectionModel model = DirectionModel::isotropic;
  std::uint64_t seed = 0;
};

struct Theorem2Report {
  std::vector<double> entropies;  // normalized, per component
  std::vector<double> retention_cgc;
  std::vector<double> retention_uniform;
  std::vector<Estimate> per_component_cgc;
  std::vector<Estimate> per_component_uniform;
  Estimate aggregate_cgc;
  Estimate aggregate_uniform;
  double difference = 0.0;  // uniform - cgc
  double difference_se = 0.0;
  bool identical_allocations = false;
};

Theorem2Report theorem2_experiment(const Theorem2Config& config);

std::string to_json(const Theorem1Report& r);
std::string to_json(const Theorem2Report& r);
std::string curve_csv(const Theorem1Report& r);

}  // namespace cgc::redsim
