#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fablelm/kv_config.hpp"
#include "fablelm/model.hpp"
#include "fablelm/packing.hpp"

namespace fablelm {

struct TrainConfig {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 0;  // 0 = 2% of total_steps (at least 1)
  std::size_t total_steps = 1000;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t micro_batch = 8;
  std::size_t accum_steps = 8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;     // 0 = evaluate after step 1 and at the end only
  std::size_t eval_max_blocks = 0;  // 0 = every held-out block
  double grad_clip = 1.0;         // global-norm clip; 0 disables
  std::size_t patience = 0;       // evals without improvement before stopping; 0 = off

  /// Fills in the warmup default.
  TrainConfig resolved() const;
  void validate() const;

  static TrainConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;
};

/// Linear warmup to peak_lr, then linear decay to 0 at total_steps.
double lr_at(const TrainConfig& config, std::size_t step);

struct AdamState {
  TensorMap<float> m;
  TensorMap<float> v;
  std::uint64_t step = 0;
};

/// One AdamW update in place. Weight decay is decoupled and applied before
/// the Adam step; tensors whose name ends in "norm" are not decayed.
/// Throws NumericError on a non-finite gradient.
void adamw_step(TensorMap<float>& params, const TensorMap<float>& grads, AdamState& state,
                double lr, const TrainConfig& config);

/// Global L2 norm over every gradient tensor.
double global_norm(const TensorMap<float>& grads);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;      // optimized objective
  double train_ce = 0.0;  // cross-entropy part
  double grad_norm = 0.0;  // before clipping
  double tokens_per_sec = 0.0;
  std::optional<double> eval_ce;
  std::optional<double> eval_ppl;
};

struct RunLog {
  std::vector<StepRecord> records;

  std::string to_jsonl() const;
  static RunLog from_jsonl(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static RunLog load(const std::filesystem::path& path);

  /// Every field except the wall-clock tokens_per_sec matches exactly.
  bool same_trajectory(const RunLog& other) const;
  /// First and last records carrying an eval_ce.
  std::optional<double> first_eval_ce() const;
  std::optional<double> last_eval_ce() const;
};

/// Blocks [0, n - k) for training and the last k = max(1, n / 100) for
/// evaluation. Needs at least 2 blocks.
std::pair<PackedDataset, PackedDataset> split_holdout(const PackedDataset& data);

/// Deterministic stream of block indices: a fresh seeded shuffle per epoch.
class BlockSampler {
 public:
  BlockSampler(std::size_t block_count, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t n);
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::size_t count_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t epoch_ = 0;
};

TokenBatch make_batch(const PackedDataset& data, const std::vector<std::size_t>& blocks);

/// Objective value and parameter gradients for one micro-batch.
struct MicroStep {
  double loss = 0.0;
  double ce = 0.0;
  TensorMap<float> grads;
};
using LossFn = std::function<MicroStep(const Checkpoint&, const TokenBatch&)>;

struct TrainHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called after every periodic evaluation with the current weights.
  std::function<void(std::size_t step, const Checkpoint&)> on_eval;
  const std::atomic<bool>* cancel = nullptr;
};

struct TrainResult {
  Checkpoint ckpt;
  RunLog log;
  bool stopped_early = false;
  bool cancelled = false;
};

/// The optimizer loop shared by pretraining and distillation.
TrainResult train_loop(Checkpoint init, const PackedDataset& train, const PackedDataset& heldout,
                       const TrainConfig& config, const LossFn& loss_fn,
                       const TrainHooks& hooks = {});

/// Next-token cross-entropy pretraining from a seeded random init. Holds out
/// the last 1% of blocks for evaluation.
TrainResult pretrain(const PackedDataset& data, const ModelConfig& model_config,
                     const TrainConfig& config, const TrainHooks& hooks = {});

ModelConfig model_config_from_kv(const KvConfig& kv);
KvConfig model_config_to_kv(const ModelConfig& config);

}  // namespace fablelm
