#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace cgc {

using Tensor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace lm {

/// Architecture of the decoder-only transformer. d_model is derived as
/// n_heads * d_head.
struct ModelConfig {
  int n_layers = 4;
  int n_heads = 8;
  int d_head = 16;
  int d_ffn = 512;
  int vocab_size = 256;
  int context_len = 128;
  std::uint64_t seed = 42;

  int d_model() const { return n_heads * d_head; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ComponentKind : std::uint8_t { attention_head = 0, ffn = 1 };

struct ComponentId {
  ComponentKind kind = ComponentKind::attention_head;
  int layer = 0;
  int head = 0;

  auto operator<=>(const ComponentId&) const = default;
  std::string label() const;  // "L2H5", or "L2FFN"
  static ComponentId parse(const std::string& label);
};

// All attention-head components in (layer, head) order.
std::vector<ComponentId> head_components(const ModelConfig& config);

// Position of a head in head_components() order.
std::size_t head_index(const ModelConfig& config, const ComponentId& c);

struct LayerWeights {
  Tensor ln1_g, ln1_b;         // 1 x D
  Tensor w_q, w_k, w_v;        // D x D, output columns grouped by head
  Tensor w_o;                  // D x D, input rows grouped by head
  Tensor ln2_g, ln2_b;         // 1 x D
  Tensor w_fc1, b_fc1;         // D x F, 1 x F
  Tensor w_fc2, b_fc2;         // F x D, 1 x D
};

struct Checkpoint {
  ModelConfig config;
  Tensor tok_emb;  // V x D
  Tensor pos_emb;  // T x D
  std::vector<LayerWeights> layers;
  Tensor lnf_g, lnf_b;  // 1 x D
  Tensor w_out;         // D x V

  // Zero-valued tensors of the right shapes (layer norms set to identity).
  static Checkpoint zeros(const ModelConfig& config);
  // Scaled-normal initialization driven by config.seed.
  static Checkpoint initialize(const ModelConfig& config);

  // Visits (name, tensor) pairs in a fixed order.
  void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void validate() const;  // shapes + finiteness; throws ArtifactError

  // Rows [h*d_head, (h+1)*d_head) of the layer's output projection.
  Eigen::Block<Tensor> head_slice(const ComponentId& c);
  Eigen::Block<const Tensor> head_slice(const ComponentId& c) const;

  bool operator==(const Checkpoint& other) const;  // bitwise on all tensors
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path, const std::string& extra_json = "{}");
Checkpoint load_checkpoint(const std::string& path);
// Returns the "extra" object stored with save_checkpoint, as JSON text.
std::string load_checkpoint_extra(const std::string& path);

struct TrainHyper {
  int steps = 600;
  int batch_size = 16;
  double lr = 3e-3;
  double min_lr_ratio = 0.1;
  int warmup_steps = 30;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double grad_clip = 1.0;
};

struct TrainLog {
  std::vector<double> step_loss;
};

/// Trains on windows drawn from `regions` (each a [begin, end) range into
/// `tokens`). Windows never straddle a region boundary. Bit-reproducible for
/// fixed inputs and seed.
Checkpoint train_lm(std::span<const int> tokens, const std::vector<std::pair<std::size_t, std::size_t>>& regions,
                    const ModelConfig& config, const TrainHyper& hyper, std::uint64_t seed, TrainLog* log = nullptr,
                    const std::function<void(int, double)>& progress = {});

// Mean next-token cross-entropy of `targets` given `inputs`, and its
// gradient with respect to every parameter (returned in checkpoint layout).
double loss_and_gradient(const Checkpoint& ckpt, std::span<const int> inputs, std::span<const int> targets, int n_seq,
                         int seq_len, Checkpoint& grad);

// Convenience: the whole stream is one region.
Checkpoint train_lm(std::span<const int> tokens, const ModelConfig& config, const TrainHyper& hyper,
                    std::uint64_t seed, TrainLog* log = nullptr);

/// Logits for n_seq back-to-back sequences of seq_len tokens. Rows are
/// sequence-major (n_seq * seq_len) x vocab.
Tensor forward_logits(const Checkpoint& ckpt, std::span<const int> tokens, int n_seq, int seq_len);

struct NllSum {
  double total = 0.0;  // accumulated in double
  std::size_t count = 0;
  double mean() const { return count ? total / static_cast<double>(count) : 0.0; }
};

// Next-token NLL over every position except the last of each sequence.
NllSum sequence_nll(const Checkpoint& ckpt, std::span<const int> tokens, int n_seq, int seq_len);

/// exp(mean NLL) over n_chunks consecutive, non-overlapping chunks taken from
/// the head of `stream`.
double evaluate_ppl(const Checkpoint& ckpt, std::span<const int> stream, int chunk_len, int n_chunks);

struct ManifestEntry {
  ComponentId component;
  std::size_t offset = 0;  // in floats, into ActivationDump::data
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct ActivationDump {
  std::vector<ManifestEntry> manifest;
  std::vector<float> data;
  std::uint64_t corpus_fingerprint = 0;
  std::vector<std::pair<std::size_t, std::size_t>> sequence_boundaries;  // row ranges [begin, end)
  std::vector<int> category_labels;                                      // one per sequence
  std::vector<std::size_t> sequence_starts;                              // token offsets into the corpus

  const ManifestEntry& entry(const ComponentId& c) const;
  bool contains(const ComponentId& c) const;
  // Row-major rows x cols view of a component's activations.
  Eigen::Map<const Tensor> matrix(const ComponentId& c) const;
  std::size_t rows() const { return manifest.empty() ? 0 : manifest.front().rows; }
  void validate() const;
};

void save_dump(const ActivationDump& dump, const std::string& path, const std::string& extra_json = "{}");
ActivationDump load_dump(const std::string& path);
std::string load_dump_extra(const std::string& path);

struct CalibrationSample {
  std::vector<std::size_t> starts;
  std::vector<int> categories;
};

/// Draws n_seq windows of seq_len tokens. Windows are spread evenly over the
/// regions (region index = category label), with seeded start offsets.
CalibrationSample sample_calibration(const std::vector<std::pair<std::size_t, std::size_t>>& regions, int n_seq,
                                     int seq_len, std::uint64_t seed);

/// Captures each head's per-token context vector (attention-weighted value
/// sum, before the output projection) for the given windows.
ActivationDump capture_activations(const Checkpoint& ckpt, std::span<const int> tokens,
                                   const CalibrationSample& sample, int seq_len,
                                   const std::vector<ComponentId>& components);

// Seeded variant: windows sampled from the whole stream, all in category 0.
ActivationDump capture_activations(const Checkpoint& ckpt, std::span<const int> tokens, int n_seq, int seq_len,
                                   const std::vector<ComponentId>& components, std::uint64_t seed);

Checkpoint ablate_head(const Checkpoint& ckpt, const ComponentId& c);

enum class PruneCriterion { magnitude };

struct PruneSpec {
  std::vector<double> retention;  // one per head, head_components() order
  PruneCriterion criterion = PruneCriterion::magnitude;
};

// Number of weights kept from a slice of n weights at retention ratio xi.
std::size_t kept_count(double xi, std::size_t n);

Checkpoint apply_prune(const Checkpoint& ckpt, const PruneSpec& spec);

// Fraction of head output-projection weights that are nonzero.
double head_projection_density(const Checkpoint& ckpt);

}  // namespace lm
}  // namespace cgc
