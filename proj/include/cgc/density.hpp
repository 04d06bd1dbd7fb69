#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cgc/sae.hpp"
#include "cgc/tinylm.hpp"

namespace cgc::density {

// Unit over which active-feature sets are formed for consistency.
enum class Granularity { sequence, token };

struct DensityParams {
  double tau_min = 0.01;
  std::array<double, 3> alpha{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // breadth, diversity, consistency
  double gamma = 2.0;
  int n_pairs = 256;
  std::uint64_t pair_seed = 7;
  Granularity granularity = Granularity::sequence;

  void validate() const;
};

struct Breadth {
  int count = 0;            // features with activation frequency >= tau_min
  double normalized = 0.0;  // count / F
};

struct Diversity {
  double entropy = 0.0;     // nats, of the normalized frequency distribution
  double normalized = 0.0;  // entropy / ln F
};

struct SubMeasures {
  Breadth breadth;
  Diversity diversity;
  double consistency = 0.0;
};

// Thrown when no feature ever fires; such a component has density 0.
class DegenerateComponent : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fraction of rows on which each feature is nonzero.
std::vector<double> activation_frequencies(const sae::FeatureMatrix& fm);

Breadth feature_breadth(const sae::FeatureMatrix& fm, double tau_min);

/// Entropy of q_f = p_f / sum(p). Throws DegenerateComponent when every
/// frequency is zero.
Diversity feature_diversity(const sae::FeatureMatrix& fm);

/// Mean Jaccard similarity of active-feature sets over pairs of units with
/// differing category labels. At most n_pairs pairs are drawn without
/// replacement using pair_seed; when fewer exist, all are used.
/// Jaccard of two empty sets is 1.
double cross_consistency(const sae::FeatureMatrix& fm, const std::vector<std::pair<std::size_t, std::size_t>>& boundaries,
                         const std::vector<int>& categories, int n_pairs, std::uint64_t pair_seed,
                         Granularity granularity = Granularity::sequence);

double jaccard(const std::vector<int>& a, const std::vector<int>& b);  // both sorted ascending

/// Weighted geometric mean of x^(1/gamma) over (breadth, diversity,
/// consistency); zero if any sub-measure is zero.
double capability_density(const SubMeasures& sub, const DensityParams& params);

struct DensityRecord {
  lm::ComponentId component;
  SubMeasures sub;
  double delta = 0.0;
  bool degenerate = false;
};

struct Summary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  lm::ComponentId argmin;
  lm::ComponentId argmax;
};

struct DensityMap {
  DensityParams params;
  std::vector<DensityRecord> records;  // sorted by (layer, head)
  std::uint64_t dump_fingerprint = 0;
  Summary summary;
  std::vector<std::string> warnings;

  const DensityRecord& at(const lm::ComponentId& c) const;
  std::vector<double> deltas() const;
};

Summary summarize(const std::vector<DensityRecord>& records);

/// Encodes each dumped component with its SAE and computes every
/// sub-measure and the density. Throws InvalidArgument when a component has
/// no SAE in the bank.
DensityMap build_density_map(const lm::ActivationDump& dump, const sae::SaeBank& bank, const DensityParams& params);

std::string to_json(const DensityMap& map);
std::string to_csv(const DensityMap& map);
DensityMap from_json(const std::string& text);

}  // namespace cgc::density
