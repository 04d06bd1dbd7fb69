#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cgc/tinylm.hpp"

namespace cgc::importance {

// How per-weight scores are folded into one number per head. With equal
// slice sizes both give the same ranking.
enum class Aggregation { mean, sum };

/// score(i, j) = |w(i, j)| * act_norms[j]; w is n_out x d_in.
Eigen::MatrixXd wanda_scores(const Eigen::MatrixXd& w, std::span<const double> act_norms);

// L2 norm of each column of a rows x cols activation matrix.
std::vector<double> column_norms(const Eigen::Map<const Tensor>& acts);

/// Aggregated Wanda score of one head's output-projection slice, with input
/// norms taken from that head's captured activations.
double head_wanda(const lm::Checkpoint& ckpt, const lm::ActivationDump& dump, const lm::ComponentId& c,
                  Aggregation agg = Aggregation::mean);

// Mean |w| over a head's output-projection slice.
double head_magnitude(const lm::Checkpoint& ckpt, const lm::ComponentId& c);

struct AblationResult {
  double baseline_ppl = 0.0;
  std::vector<lm::ComponentId> components;
  std::vector<double> ablated_ppl;
  std::vector<double> delta_ppl;
};

/// Perplexity change from zeroing each head's output-projection slice, all
/// measured on the same chunk set as the baseline.
AblationResult ablation_scan(const lm::Checkpoint& ckpt, std::span<const int> eval_stream, int chunk_len, int n_chunks,
                             const std::vector<lm::ComponentId>& components);

struct ImportanceRecord {
  lm::ComponentId component;
  double wanda = 0.0;
  double magnitude = 0.0;
  double ablation_dppl = 0.0;
  bool has_ablation = false;
};

struct ImportanceMap {
  Aggregation aggregation = Aggregation::mean;
  std::vector<ImportanceRecord> records;  // (layer, head) order
  double baseline_ppl = 0.0;              // set when ablation was run

  std::vector<double> wanda() const;
  std::vector<double> ablation() const;
};

ImportanceMap build_importance(const lm::Checkpoint& ckpt, const lm::ActivationDump& dump,
                               Aggregation agg = Aggregation::mean);
void attach_ablation(ImportanceMap& map, const AblationResult& scan);

std::string to_json(const ImportanceMap& map);
std::string to_csv(const ImportanceMap& map);
ImportanceMap from_json(const std::string& text);
std::string ablation_csv(const AblationResult& scan);

}  // namespace cgc::importance
