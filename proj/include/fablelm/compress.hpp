#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fablelm/kv_config.hpp"
#include "fablelm/model.hpp"
#include "fablelm/packing.hpp"
#include "fablelm/train.hpp"

namespace fablelm {

// ---- Structured pruning -----------------------------------------------------

enum class Selection { kMagnitude, kRandom };

struct PruneConfig {
  double mlp_rate = 0.0;
  double head_rate = 0.0;
  Selection selection = Selection::kMagnitude;
  std::uint64_t seed = 0;  // random selection only

  void validate() const;
  friend bool operator==(const PruneConfig&, const PruneConfig&) = default;
};

/// floor(rate * n), guarded against representation error (0.29 * 100 -> 29).
std::size_t pruned_units(double rate, std::size_t n);

/// L2 norm of each MLP neuron's gate column, up column and down row.
std::vector<double> neuron_scores(const Checkpoint& ckpt, std::size_t layer);
/// L2 norm of the output-projection rows each head writes through.
std::vector<double> head_scores(const Checkpoint& ckpt, std::size_t layer);

/// Per layer, masks floor(rate * n) neurons and heads: the lowest-scoring
/// ones (ties to the lower index) or a seeded random subset.
ForwardMasks build_masks(const Checkpoint& ckpt, const PruneConfig& config);

/// 3 * hidden weights per masked neuron, 4 * hidden * head_dim per masked head.
std::uint64_t pruned_params(const ModelConfig& config, const ForwardMasks& masks);

struct SweepPoint {
  double mlp_rate = 0.0;
  double head_rate = 0.0;
  double ce = 0.0;
  double ppl = 0.0;
  double delta_ce_pct = 0.0;  // vs. the unpruned model
  std::uint64_t pruned_params = 0;
};

struct SweepResult {
  double baseline_ce = 0.0;
  std::vector<SweepPoint> points;  // mlp-rate major, in the order given

  const SweepPoint* find(double mlp_rate, double head_rate) const;
  std::string to_json() const;
  static SweepResult from_json(const std::string& text);
};

struct SweepOptions {
  Selection selection = Selection::kMagnitude;
  std::uint64_t seed = 0;
  std::size_t batch = 8;
  std::size_t max_blocks = 0;  // 0 = all
};

SweepResult prune_sweep(const Checkpoint& ckpt, const PackedDataset& eval_blocks,
                        const std::vector<double>& mlp_rates,
                        const std::vector<double>& head_rates, const SweepOptions& options = {});

/// The feasible point (delta <= budget) with the most pruned parameters;
/// ties go to the larger mlp rate, then the larger head rate.
/// Throws InvalidArgument when nothing qualifies.
PruneConfig select_config(const SweepResult& sweep, double budget_pct,
                          bool include_unpruned = true);

// ---- Distillation -----------------------------------------------------------

struct DistillConfig {
  double alpha = 1.0;
  double beta = 0.1;
  double temperature = 1.0;
  TrainConfig train;

  void validate() const;
  /// Accepts alpha, beta, temperature plus every TrainConfig key.
  static DistillConfig from_kv(const KvConfig& kv);
};

/// KL(p || q) in nats, with 0 log 0 = 0. Infinite when q = 0 where p > 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct DistillLoss {
  double total = 0.0;
  double kl = 0.0;  // mean over scored positions, times temperature^2
  double ce = 0.0;
  std::size_t positions = 0;
  Tensor<float> dlogits;  // d total / d student logits
};

/// alpha * T^2 * mean KL(softmax(t/T) || softmax(s/T)) + beta * CE(s), both
/// over the next-token positions ce_loss scores.
DistillLoss distill_loss(const Tensor<float>& student_logits, const Tensor<float>& teacher_logits,
                         const TokenBatch& labels, double alpha, double beta, double temperature,
                         std::optional<TokenId> ignore_id = std::nullopt);

/// Trains a freshly initialised student against a frozen teacher on the same
/// split pretrain() uses.
TrainResult distill(const Checkpoint& teacher, const ModelConfig& student_config,
                    const PackedDataset& data, const DistillConfig& config,
                    const TrainHooks& hooks = {});

// ---- Quantization -----------------------------------------------------------

struct QuantizedTensor {
  std::vector<std::size_t> shape;
  int bits = 0;      // 8 or 6; 0 = kept as f32
  float scale = 0.0f;
  std::vector<std::int8_t> q;  // quantized values (bits > 0)
  std::vector<float> raw;      // f32 values (bits == 0)
};

struct QuantizedCheckpoint {
  ModelConfig config;
  int bits = 8;
  std::map<std::string, QuantizedTensor> tensors;
};

int qmax_for_bits(int bits);

/// Symmetric per-tensor: scale = max|w| / qmax, q = round-half-even(w / scale).
QuantizedTensor quantize_tensor(const Tensor<float>& t, int bits);
Tensor<float> dequantize_tensor(const QuantizedTensor& q);

/// Norm gains stay f32.
QuantizedCheckpoint quantize(const Checkpoint& ckpt, int bits);
Checkpoint dequantize(const QuantizedCheckpoint& q);

/// Four 6-bit two's-complement values per three bytes, little-endian bit order.
std::vector<std::uint8_t> pack6(std::span<const std::int8_t> values);
std::vector<std::int8_t> unpack6(std::span<const std::uint8_t> bytes, std::size_t count);

// Binary file ("TF3Q").
void save_quantized(const QuantizedCheckpoint& q, const std::filesystem::path& path);
QuantizedCheckpoint load_quantized(const std::filesystem::path& path);
std::uint64_t quantized_file_size(const QuantizedCheckpoint& q);

}  // namespace fablelm
