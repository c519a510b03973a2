#pragma once

// Decoder-only transformer: pre-norm blocks of RMSNorm -> causal multi-head
// attention with rotary embeddings -> residual -> RMSNorm -> SiLU-gated MLP ->
// residual, then a final RMSNorm and a projection onto the vocabulary
// (tied to the token embedding or a separate head).
//
// The math is templated on the scalar type. float is the production path;
// double exists so finite-difference checks are not drowned in rounding noise.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fablelm/error.hpp"
#include "fablelm/rng.hpp"

namespace fablelm {

struct ModelConfig {
  std::uint32_t vocab_size = 32000;
  std::uint32_t n_layers = 6;
  std::uint32_t hidden = 512;
  std::uint32_t n_heads = 8;
  std::uint32_t head_dim = 64;
  std::uint32_t mlp_dim = 1365;
  std::uint32_t max_seq = 2048;
  bool tie_embeddings = false;
  double rope_theta = 10000.0;

  /// Throws InvalidArgument unless n_heads * head_dim == hidden, head_dim is
  /// even, every count is >= 1 and rope_theta > 0.
  void validate() const;

  /// 6 x 512, 8 heads, MLP 1365, untied (51,645,952 parameters).
  static ModelConfig teacher();
  /// 6 x 384, 6 heads, MLP 1024, tied.
  static ModelConfig student();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kRmsEpsilon = 1e-5;

template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims) : shape(std::move(dims)) {
    std::size_t n = 1;
    for (const auto d : shape) n *= d;
    data.assign(n, T(0));
  }
  std::size_t numel() const { return data.size(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

template <typename T>
using TensorMap = std::map<std::string, Tensor<T>>;

/// Parameter names. Weights are stored [in, out], row-major.
namespace param {
inline const std::string kTokenEmbedding = "tok_embeddings";  // [vocab, hidden]
inline const std::string kFinalNorm = "final_norm";           // [hidden]
inline const std::string kLmHead = "lm_head";                 // [hidden, vocab], untied only
std::string layer(std::size_t l, std::string_view name);      // "layers.<l>.<name>"
// Per-layer names: attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down.
}  // namespace param

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
};

/// Every parameter tensor the config implies, in a fixed order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

/// Closed-form parameter count.
std::uint64_t param_count(const ModelConfig& config);

template <typename T>
struct BasicCheckpoint {
  ModelConfig config;
  TensorMap<T> tensors;

  const Tensor<T>& at(const std::string& name) const {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw InvalidArgument("checkpoint has no tensor " + name);
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw InvalidArgument("checkpoint has no tensor " + name);
    return it->second;
  }
  std::uint64_t scalar_count() const {
    std::uint64_t n = 0;
    for (const auto& [_, t] : tensors) n += t.numel();
    return n;
  }
  template <typename U>
  BasicCheckpoint<U> cast() const {
    BasicCheckpoint<U> out{config, {}};
    for (const auto& [name, t] : tensors) {
      Tensor<U> c;
      c.shape = t.shape;
      c.data.assign(t.data.begin(), t.data.end());
      out.tensors.emplace(name, std::move(c));
    }
    return out;
  }

  friend bool operator==(const BasicCheckpoint&, const BasicCheckpoint&) = default;
};

using Checkpoint = BasicCheckpoint<float>;

/// Throws InvalidArgument if tensor names/shapes disagree with the config or
/// any value is non-finite.
template <typename T>
void validate_checkpoint(const BasicCheckpoint<T>& ckpt);

/// Gaussian init (std 0.02, residual projections scaled by 1/sqrt(2 L)),
/// unit norm gains. Deterministic in `seed`.
Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed);

/// Structured pruning masks, applied multiplicatively: mlp[l][j] scales MLP
/// neuron j of layer l, heads[l][h] scales head h's output.
struct ForwardMasks {
  std::vector<std::vector<float>> mlp;
  std::vector<std::vector<float>> heads;

  static ForwardMasks ones(const ModelConfig& config);
  /// Lengths match the config and every entry is 0 or 1.
  void validate(const ModelConfig& config) const;
  std::size_t masked_neurons() const;
  std::size_t masked_heads() const;

  friend bool operator==(const ForwardMasks&, const ForwardMasks&) = default;
};

/// Row-major [batch, seq] token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<TokenId> ids;

  TokenId at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
  std::span<const TokenId> row(std::size_t b) const {
    return std::span<const TokenId>(ids).subspan(b * seq, seq);
  }
  /// Stacks equal-length sequences.
  static TokenBatch from_rows(const std::vector<std::span<const TokenId>>& rows);
};

/// Logits [batch, seq, vocab].
template <typename T>
Tensor<T> forward(const BasicCheckpoint<T>& ckpt, const TokenBatch& batch,
                  const ForwardMasks* masks = nullptr);

/// Mean next-token cross-entropy (nats): position t is scored against
/// labels[t + 1]; targets equal to `ignore_id` are skipped.
/// Throws InvalidArgument when every position is ignored.
template <typename T>
T ce_loss(const Tensor<T>& logits, const TokenBatch& labels,
          std::optional<TokenId> ignore_id = std::nullopt);

template <typename T>
struct LossGrad {
  T loss = T(0);
  std::size_t positions = 0;
  Tensor<T> dlogits;
};

/// ce_loss plus its gradient with respect to the logits.
template <typename T>
LossGrad<T> ce_loss_grad(const Tensor<T>& logits, const TokenBatch& labels,
                         std::optional<TokenId> ignore_id = std::nullopt);

/// A forward pass that keeps its activations so gradients can be pulled back
/// from any loss on the logits. Holds references to the checkpoint and
/// masks; both must outlive it.
template <typename T>
class ForwardPass {
 public:
  ForwardPass(const BasicCheckpoint<T>& ckpt, const TokenBatch& batch,
              const ForwardMasks* masks = nullptr);
  ~ForwardPass();
  ForwardPass(ForwardPass&&) noexcept;
  ForwardPass& operator=(ForwardPass&&) noexcept;

  const Tensor<T>& logits() const;
  /// Gradients of sum(dlogits * logits) for every parameter.
  TensorMap<T> backward(const Tensor<T>& dlogits) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

template <typename T>
struct LossAndGrads {
  T loss = T(0);
  TensorMap<T> grads;
};

/// Cross-entropy loss and its gradient for every parameter.
/// Throws NumericError on a non-finite loss.
template <typename T>
LossAndGrads<T> backward(const BasicCheckpoint<T>& ckpt, const TokenBatch& batch,
                         const ForwardMasks* masks = nullptr,
                         std::optional<TokenId> ignore_id = std::nullopt);

/// Incremental decoding with a key/value cache. Produces the same logits as
/// forward() at each position.
class DecodeSession {
 public:
  explicit DecodeSession(const Checkpoint& ckpt, const ForwardMasks* masks = nullptr);
  ~DecodeSession();
  DecodeSession(DecodeSession&&) noexcept;

  /// Appends one token and returns the next-token logits [vocab].
  std::span<const float> step(TokenId id);
  std::size_t position() const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

struct GenerateOptions {
  std::size_t max_new = 64;
  double temperature = 0.0;  // 0 = greedy
  std::size_t top_k = 50;
  std::uint64_t seed = 0;
  bool stop_at_eos = true;
  TokenId eos_id = 3;
};

/// Samples a continuation of `prompt` (which must be non-empty). Returns only
/// the new tokens; a terminating eos is not included. Stops early at eos or
/// when the context reaches max_seq.
std::vector<TokenId> generate(const Checkpoint& ckpt, std::span<const TokenId> prompt,
                              const GenerateOptions& options, const ForwardMasks* masks = nullptr);

/// Picks a token from logits: argmax when temperature is 0, otherwise a
/// seeded draw from the temperature-scaled top-k softmax.
/// Ties go to the lower id.
TokenId sample_token(std::span<const float> logits, double temperature, std::size_t top_k,
                     Rng& rng);

// Binary checkpoint file ("TF3C").
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Size in bytes save_checkpoint would write.
std::uint64_t checkpoint_file_size(const Checkpoint& ckpt);

}  // namespace fablelm
