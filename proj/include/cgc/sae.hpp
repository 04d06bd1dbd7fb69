#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cgc/tinylm.hpp"

namespace cgc::sae {

struct SaeConfig {
  int d_in = 16;
  int dict_size = 128;
  int k = 8;
  double l1_coeff = 1e-4;
  double lr = 2e-4;
  int epochs = 5;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SaeConfig&) const = default;
};

/// TopK sparse autoencoder. Encoding keeps the k largest post-ReLU
/// pre-activations per row.
struct Sae {
  Tensor w_enc;  // F x d_in
  Tensor b_enc;  // 1 x F
  Tensor w_dec;  // d_in x F
  Tensor b_dec;  // 1 x d_in

  int d_in() const { return static_cast<int>(w_enc.cols()); }
  int dict_size() const { return static_cast<int>(w_enc.rows()); }

  // Decoder columns as random unit vectors, encoder = decoder transpose,
  // zero biases.
  static Sae initialize(int d_in, int dict_size, std::uint64_t seed);
};

/// Row-compressed nonnegative feature activations, at most k entries per row.
/// Within a row, entries are stored in ascending feature order.
class FeatureMatrix {
 public:
  FeatureMatrix(std::size_t rows, std::size_t cols) : cols_(cols), row_ptr_(rows + 1, 0) {}

  std::size_t rows() const { return row_ptr_.size() - 1; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return indices_.size(); }

  std::span<const int> row_indices(std::size_t r) const {
    return {indices_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }
  std::span<const float> row_values(std::size_t r) const {
    return {values_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }

  // Rows must be appended in order; indices ascending, values > 0.
  void set_row(std::size_t r, std::span<const int> idx, std::span<const float> val);

  Tensor dense() const;
  static FeatureMatrix from_dense(const Tensor& dense);

 private:
  std::size_t cols_;
  std::vector<std::size_t> row_ptr_;
  std::vector<int> indices_;
  std::vector<float> values_;
};

struct TrainStats {
  std::vector<double> epoch_loss;  // reconstruction + L1, mean over rows
  std::vector<double> epoch_mse;   // reconstruction only
  int dead_features = 0;           // never active during the final epoch
};

// Row-major rows x d_in activation matrix.
using ActsView = Eigen::Map<const Tensor>;

/// Adam on mean squared reconstruction error plus l1_coeff * ||a||_1, with
/// the TopK constraint applied in the forward pass and decoder columns
/// renormalized to unit L2 norm after every step. Rows are reshuffled each
/// epoch from cfg.seed.
std::pair<Sae, TrainStats> train_sae(const ActsView& acts, const SaeConfig& cfg);

FeatureMatrix encode(const Sae& sae, const ActsView& acts, int k);
Tensor reconstruct(const Sae& sae, const FeatureMatrix& fm);

// Rescales decoder columns to unit norm and compensates the encoder rows
// and encoder bias so encode-then-reconstruct is unchanged when k = F.
void normalize_decoder_preserving(Sae& sae);

struct BankEntry {
  SaeConfig config;
  Sae sae;
  TrainStats stats;
};

using SaeBank = std::map<lm::ComponentId, BankEntry>;

void save_bank(const SaeBank& bank, const std::string& path, const std::string& extra_json = "{}");
SaeBank load_bank(const std::string& path);
std::string load_bank_extra(const std::string& path);

std::string stats_json(const SaeBank& bank);  // {component: {epoch_loss, epoch_mse, dead_features}}

}  // namespace cgc::sae
