#include "fablelm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fablelm/rng.hpp"
#include "model_kernels.hpp"

namespace fablelm {

namespace k = kernels;

void ModelConfig::validate() const {
  if (vocab_size < 1 || n_layers < 1 || hidden < 1 || n_heads < 1 || head_dim < 1 ||
      mlp_dim < 1 || max_seq < 1) {
    throw InvalidArgument("model dimensions must all be >= 1");
  }
  if (std::uint64_t{n_heads} * head_dim != hidden) {
    throw InvalidArgument("n_heads * head_dim (" + std::to_string(n_heads) + " * " +
                          std::to_string(head_dim) + ") != hidden (" + std::to_string(hidden) +
                          ")");
  }
  if (head_dim % 2 != 0) throw InvalidArgument("head_dim must be even for rotary embeddings");
  if (!(rope_theta > 0.0) || !std::isfinite(rope_theta)) {
    throw InvalidArgument("rope_theta must be a positive number");
  }
}

ModelConfig ModelConfig::teacher() {
  ModelConfig c;
  c.vocab_size = 32000;
  c.n_layers = 6;
  c.hidden = 512;
  c.n_heads = 8;
  c.head_dim = 64;
  c.mlp_dim = 1365;
  c.max_seq = 2048;
  c.tie_embeddings = false;
  return c;
}

ModelConfig ModelConfig::student() {
  ModelConfig c;
  c.vocab_size = 32000;
  c.n_layers = 6;
  c.hidden = 384;
  c.n_heads = 6;
  c.head_dim = 64;
  c.mlp_dim = 1024;
  c.max_seq = 2048;
  c.tie_embeddings = true;
  return c;
}

namespace param {
std::string layer(std::size_t l, std::string_view name) {
  return "layers." + std::to_string(l) + "." + std::string(name);
}
}  // namespace param

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  const std::size_t V = c.vocab_size, H = c.hidden, M = c.mlp_dim;
  std::vector<ParamSpec> specs;
  specs.push_back({param::kTokenEmbedding, {V, H}});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    specs.push_back({param::layer(l, "attn_norm"), {H}});
    specs.push_back({param::layer(l, "wq"), {H, H}});
    specs.push_back({param::layer(l, "wk"), {H, H}});
    specs.push_back({param::layer(l, "wv"), {H, H}});
    specs.push_back({param::layer(l, "wo"), {H, H}});
    specs.push_back({param::layer(l, "mlp_norm"), {H}});
    specs.push_back({param::layer(l, "w_gate"), {H, M}});
    specs.push_back({param::layer(l, "w_up"), {H, M}});
    specs.push_back({param::layer(l, "w_down"), {M, H}});
  }
  specs.push_back({param::kFinalNorm, {H}});
  if (!c.tie_embeddings) specs.push_back({param::kLmHead, {H, V}});
  return specs;
}

std::uint64_t param_count(const ModelConfig& c) {
  c.validate();
  const std::uint64_t V = c.vocab_size, H = c.hidden, M = c.mlp_dim, L = c.n_layers;
  const std::uint64_t per_layer = 4 * H * H + 3 * H * M + 2 * H;
  return V * H + L * per_layer + H + (c.tie_embeddings ? 0 : H * V);
}

template <typename T>
void validate_checkpoint(const BasicCheckpoint<T>& ckpt) {
  const auto specs = parameter_specs(ckpt.config);
  if (ckpt.tensors.size() != specs.size()) {
    throw InvalidArgument("checkpoint has " + std::to_string(ckpt.tensors.size()) +
                          " tensors, config implies " + std::to_string(specs.size()));
  }
  for (const auto& spec : specs) {
    const auto it = ckpt.tensors.find(spec.name);
    if (it == ckpt.tensors.end()) throw InvalidArgument("checkpoint is missing " + spec.name);
    if (it->second.shape != spec.shape) throw InvalidArgument("wrong shape for " + spec.name);
    std::size_t n = 1;
    for (const auto d : spec.shape) n *= d;
    if (it->second.data.size() != n) throw InvalidArgument("wrong element count for " + spec.name);
    for (const T v : it->second.data) {
      if (!std::isfinite(v)) throw InvalidArgument("non-finite value in " + spec.name);
    }
  }
}

Checkpoint init_checkpoint(const ModelConfig& config, std::uint64_t seed) {
  Checkpoint ckpt{config, {}};
  Rng rng(seed);
  const double residual_std = 0.02 / std::sqrt(2.0 * config.n_layers);
  for (const auto& spec : parameter_specs(config)) {
    Tensor<float> t(spec.shape);
    if (spec.shape.size() == 1) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else {
      const bool residual = spec.name.ends_with(".wo") || spec.name.ends_with(".w_down");
      const double std = residual ? residual_std : 0.02;
      for (auto& v : t.data) v = static_cast<float>(std * standard_normal(rng));
    }
    ckpt.tensors.emplace(spec.name, std::move(t));
  }
  return ckpt;
}

ForwardMasks ForwardMasks::ones(const ModelConfig& config) {
  ForwardMasks m;
  m.mlp.assign(config.n_layers, std::vector<float>(config.mlp_dim, 1.0f));
  m.heads.assign(config.n_layers, std::vector<float>(config.n_heads, 1.0f));
  return m;
}

void ForwardMasks::validate(const ModelConfig& config) const {
  if (mlp.size() != config.n_layers || heads.size() != config.n_layers) {
    throw InvalidArgument("mask layer count does not match the model");
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    if (mlp[l].size() != config.mlp_dim) throw InvalidArgument("MLP mask has the wrong width");
    if (heads[l].size() != config.n_heads) throw InvalidArgument("head mask has the wrong width");
    for (const float v : mlp[l]) {
      if (v != 0.0f && v != 1.0f) throw InvalidArgument("mask entries must be 0 or 1");
    }
    for (const float v : heads[l]) {
      if (v != 0.0f && v != 1.0f) throw InvalidArgument("mask entries must be 0 or 1");
    }
  }
}

std::size_t ForwardMasks::masked_neurons() const {
  std::size_t n = 0;
  for (const auto& row : mlp) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), 0.0f));
  return n;
}

std::size_t ForwardMasks::masked_heads() const {
  std::size_t n = 0;
  for (const auto& row : heads) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), 0.0f));
  return n;
}

TokenBatch TokenBatch::from_rows(const std::vector<std::span<const TokenId>>& rows) {
  TokenBatch b;
  if (rows.empty()) return b;
  b.batch = rows.size();
  b.seq = rows.front().size();
  b.ids.reserve(b.batch * b.seq);
  for (const auto& r : rows) {
    if (r.size() != b.seq) throw InvalidArgument("batch rows must have equal length");
    b.ids.insert(b.ids.end(), r.begin(), r.end());
  }
  return b;
}

namespace {

template <typename T>
struct LayerActs {
  std::vector<T> x_in, rms1, a, q, k, v, probs, o, x_mid, rms2, b, gate, up, hmid;
};

template <typename T>
struct SeqActs {
  std::vector<LayerActs<T>> layers;
  std::vector<T> x_final, rms_f, f;
};

void check_batch(const ModelConfig& c, const TokenBatch& batch) {
  if (batch.batch == 0 || batch.seq == 0) throw InvalidArgument("empty batch");
  if (batch.ids.size() != batch.batch * batch.seq) throw InvalidArgument("batch size mismatch");
  if (batch.seq > c.max_seq) {
    throw InvalidArgument("sequence length " + std::to_string(batch.seq) + " exceeds max_seq " +
                          std::to_string(c.max_seq));
  }
  for (const TokenId id : batch.ids) {
    if (id >= c.vocab_size) {
      throw InvalidArgument("token id " + std::to_string(id) + " out of range for vocab " +
                            std::to_string(c.vocab_size));
    }
  }
}

template <typename T>
struct PassState {
  const BasicCheckpoint<T>* ckpt;
  TokenBatch batch;
  k::Weights<T> w;
  k::MaskValues<T> masks;
  k::RopeTable<T> rope;
  std::vector<SeqActs<T>> seqs;
  Tensor<T> logits;

  PassState(const BasicCheckpoint<T>& c, const TokenBatch& b, const ForwardMasks* m)
      : ckpt(&c),
        batch(b),
        w(k::resolve(c)),
        masks(c.config, m),
        rope(b.seq, c.config.head_dim, c.config.rope_theta) {}

  void run_sequence(std::size_t bi, bool keep);
  void backward_sequence(std::size_t bi, const T* dlogits, TensorMap<T>& grads) const;
};

template <typename T>
void PassState<T>::run_sequence(std::size_t bi, bool keep) {
  const auto& c = ckpt->config;
  const std::size_t S = batch.seq, H = c.hidden, M = c.mlp_dim, V = c.vocab_size;
  const std::size_t nh = c.n_heads, d = c.head_dim;
  SeqActs<T>& acts = seqs[bi];
  acts.layers.resize(keep ? c.n_layers : 1);

  std::vector<T> x(S * H);
  for (std::size_t t = 0; t < S; ++t) {
    const T* e = w.emb + std::size_t{batch.at(bi, t)} * H;
    std::copy(e, e + H, x.begin() + t * H);
  }
  std::vector<T> tmp(S * H);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    LayerActs<T>& A = acts.layers[keep ? l : 0];
    A.x_in = x;
    A.rms1.resize(S);
    A.a.resize(S * H);
    k::rmsnorm(x.data(), lw.attn_norm, A.a.data(), A.rms1.data(), S, H);
    A.q.resize(S * H);
    A.k.resize(S * H);
    A.v.resize(S * H);
    k::matmul(A.a.data(), lw.wq, A.q.data(), S, H, H);
    k::matmul(A.a.data(), lw.wk, A.k.data(), S, H, H);
    k::matmul(A.a.data(), lw.wv, A.v.data(), S, H, H);
    for (std::size_t t = 0; t < S; ++t) {
      k::rope_row(A.q.data() + t * H, nh, d, rope, t);
      k::rope_row(A.k.data() + t * H, nh, d, rope, t);
    }
    A.probs.assign(nh * S * S, T(0));
    A.o.resize(S * H);
    for (std::size_t t = 0; t < S; ++t) {
      k::attend_row(A.q.data() + t * H, A.k.data(), A.v.data(), t + 1, nh, d,
                    masks.heads[l].data(), A.probs.data() + t * S, S * S, A.o.data() + t * H);
    }
    k::matmul(A.o.data(), lw.wo, tmp.data(), S, H, H);
    for (std::size_t i = 0; i < S * H; ++i) x[i] += tmp[i];
    A.x_mid = x;

    A.rms2.resize(S);
    A.b.resize(S * H);
    k::rmsnorm(x.data(), lw.mlp_norm, A.b.data(), A.rms2.data(), S, H);
    A.gate.resize(S * M);
    A.up.resize(S * M);
    A.hmid.resize(S * M);
    k::matmul(A.b.data(), lw.w_gate, A.gate.data(), S, H, M);
    k::matmul(A.b.data(), lw.w_up, A.up.data(), S, H, M);
    const T* mm = masks.mlp[l].data();
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t j = 0; j < M; ++j) {
        const std::size_t i = t * M + j;
        A.hmid[i] = k::silu(A.gate[i]) * A.up[i] * mm[j];
      }
    }
    k::matmul(A.hmid.data(), lw.w_down, tmp.data(), S, M, H);
    for (std::size_t i = 0; i < S * H; ++i) x[i] += tmp[i];
  }
  acts.x_final = x;
  acts.rms_f.resize(S);
  acts.f.resize(S * H);
  k::rmsnorm(x.data(), w.final_norm, acts.f.data(), acts.rms_f.data(), S, H);
  T* out = logits.data.data() + bi * S * V;
  if (w.lm_head == nullptr) {
    k::matmul_bt(acts.f.data(), w.emb, out, S, H, V);
  } else {
    k::matmul(acts.f.data(), w.lm_head, out, S, H, V);
  }
  if (!keep) acts = SeqActs<T>{};
}

template <typename T>
void PassState<T>::backward_sequence(std::size_t bi, const T* dlogits,
                                              TensorMap<T>& grads) const {
  const auto& c = ckpt->config;
  const std::size_t S = batch.seq, H = c.hidden, M = c.mlp_dim, V = c.vocab_size;
  const std::size_t nh = c.n_heads, d = c.head_dim;
  const SeqActs<T>& acts = seqs[bi];
  auto g = [&](const std::string& name) { return grads.at(name).data.data(); };
  T* d_emb = g(param::kTokenEmbedding);

  std::vector<T> df(S * H);
  if (w.lm_head == nullptr) {
    k::matmul(dlogits, w.emb, df.data(), S, V, H);
    k::matmul_at_acc(dlogits, acts.f.data(), d_emb, S, V, H);
  } else {
    k::matmul_bt(dlogits, w.lm_head, df.data(), S, V, H);
    k::matmul_at_acc(acts.f.data(), dlogits, g(param::kLmHead), S, H, V);
  }
  std::vector<T> dx(S * H, T(0));
  k::rmsnorm_backward(acts.x_final.data(), w.final_norm, acts.rms_f.data(), df.data(), dx.data(),
                      g(param::kFinalNorm), S, H);

  std::vector<T> dh(S * M), dgate(S * M), dup(S * M), db(S * H), dmid(S * H);
  std::vector<T> dout(S * H), dq(S * H), dk(S * H), dv(S * H), da(S * H), dp(S);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (std::size_t l = c.n_layers; l-- > 0;) {
    const auto& lw = w.layers[l];
    const LayerActs<T>& A = acts.layers[l];
    auto gl = [&](std::string_view n) { return g(param::layer(l, n)); };

    // MLP block.
    k::matmul_bt(dx.data(), lw.w_down, dh.data(), S, H, M);
    k::matmul_at_acc(A.hmid.data(), dx.data(), gl("w_down"), S, M, H);
    const T* mm = masks.mlp[l].data();
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t j = 0; j < M; ++j) {
        const std::size_t i = t * M + j;
        const T z = A.gate[i];
        const T s = k::sigmoid(z);
        dup[i] = dh[i] * (z * s) * mm[j];
        dgate[i] = dh[i] * A.up[i] * mm[j] * s * (T(1) + z * (T(1) - s));
      }
    }
    k::matmul_at_acc(A.b.data(), dgate.data(), gl("w_gate"), S, H, M);
    k::matmul_at_acc(A.b.data(), dup.data(), gl("w_up"), S, H, M);
    k::matmul_bt(dgate.data(), lw.w_gate, db.data(), S, M, H);
    k::matmul_bt(dup.data(), lw.w_up, db.data(), S, M, H, true);
    dmid = dx;
    k::rmsnorm_backward(A.x_mid.data(), lw.mlp_norm, A.rms2.data(), db.data(), dmid.data(),
                        gl("mlp_norm"), S, H);

    // Attention block.
    k::matmul_bt(dmid.data(), lw.wo, dout.data(), S, H, H);
    k::matmul_at_acc(A.o.data(), dmid.data(), gl("wo"), S, H, H);
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (std::size_t h = 0; h < nh; ++h) {
      const T m = masks.heads[l][h];
      if (m == T(0)) continue;
      const std::size_t off = h * d;
      for (std::size_t t = 0; t < S; ++t) {
        const T* P = A.probs.data() + h * S * S + t * S;
        const T* go = dout.data() + t * H + off;
        T dot = T(0);
        for (std::size_t u = 0; u <= t; ++u) {
          const T* vu = A.v.data() + u * H + off;
          T s = T(0);
          for (std::size_t j = 0; j < d; ++j) s += go[j] * vu[j];
          dp[u] = m * s;
          dot += P[u] * dp[u];
          T* dvu = dv.data() + u * H + off;
          for (std::size_t j = 0; j < d; ++j) dvu[j] += m * P[u] * go[j];
        }
        const T* qt = A.q.data() + t * H + off;
        T* dqt = dq.data() + t * H + off;
        for (std::size_t u = 0; u <= t; ++u) {
          const T ds = P[u] * (dp[u] - dot) * scale;
          const T* ku = A.k.data() + u * H + off;
          T* dku = dk.data() + u * H + off;
          for (std::size_t j = 0; j < d; ++j) {
            dqt[j] += ds * ku[j];
            dku[j] += ds * qt[j];
          }
        }
      }
    }
    for (std::size_t t = 0; t < S; ++t) {
      k::rope_row_backward(dq.data() + t * H, nh, d, rope, t);
      k::rope_row_backward(dk.data() + t * H, nh, d, rope, t);
    }
    k::matmul_at_acc(A.a.data(), dq.data(), gl("wq"), S, H, H);
    k::matmul_at_acc(A.a.data(), dk.data(), gl("wk"), S, H, H);
    k::matmul_at_acc(A.a.data(), dv.data(), gl("wv"), S, H, H);
    k::matmul_bt(dq.data(), lw.wq, da.data(), S, H, H);
    k::matmul_bt(dk.data(), lw.wk, da.data(), S, H, H, true);
    k::matmul_bt(dv.data(), lw.wv, da.data(), S, H, H, true);
    dx = dmid;
    k::rmsnorm_backward(A.x_in.data(), lw.attn_norm, A.rms1.data(), da.data(), dx.data(),
                        gl("attn_norm"), S, H);
  }
  for (std::size_t t = 0; t < S; ++t) {
    T* row = d_emb + std::size_t{batch.at(bi, t)} * H;
    for (std::size_t i = 0; i < H; ++i) row[i] += dx[t * H + i];
  }
}

}  // namespace

template <typename T>
struct ForwardPass<T>::State : PassState<T> {
  using PassState<T>::PassState;
};

template <typename T>
ForwardPass<T>::ForwardPass(const BasicCheckpoint<T>& ckpt, const TokenBatch& batch,
                            const ForwardMasks* masks) {
  check_batch(ckpt.config, batch);
  state_ = std::make_unique<State>(ckpt, batch, masks);
  state_->seqs.resize(batch.batch);
  state_->logits = Tensor<T>({batch.batch, batch.seq, ckpt.config.vocab_size});
  for (std::size_t b = 0; b < batch.batch; ++b) state_->run_sequence(b, true);
}

template <typename T>
ForwardPass<T>::~ForwardPass() = default;
template <typename T>
ForwardPass<T>::ForwardPass(ForwardPass&&) noexcept = default;
template <typename T>
ForwardPass<T>& ForwardPass<T>::operator=(ForwardPass&&) noexcept = default;

template <typename T>
const Tensor<T>& ForwardPass<T>::logits() const {
  return state_->logits;
}

template <typename T>
TensorMap<T> ForwardPass<T>::backward(const Tensor<T>& dlogits) const {
  if (dlogits.shape != state_->logits.shape) throw InvalidArgument("dlogits shape mismatch");
  TensorMap<T> grads;
  for (const auto& spec : parameter_specs(state_->ckpt->config)) {
    grads.emplace(spec.name, Tensor<T>(spec.shape));
  }
  const std::size_t stride = state_->batch.seq * state_->ckpt->config.vocab_size;
  for (std::size_t b = 0; b < state_->batch.batch; ++b) {
    state_->backward_sequence(b, dlogits.data.data() + b * stride, grads);
  }
  return grads;
}

template <typename T>
Tensor<T> forward(const BasicCheckpoint<T>& ckpt, const TokenBatch& batch,
                  const ForwardMasks* masks) {
  check_batch(ckpt.config, batch);
  PassState<T> state(ckpt, batch, masks);
  state.seqs.resize(batch.batch);
  state.logits = Tensor<T>({batch.batch, batch.seq, ckpt.config.vocab_size});
  for (std::size_t b = 0; b < batch.batch; ++b) state.run_sequence(b, false);
  return std::move(state.logits);
}

namespace {

template <typename T>
LossGrad<T> ce_impl(const Tensor<T>& logits, const TokenBatch& labels,
                    std::optional<TokenId> ignore_id, bool want_grad) {
  if (logits.shape.size() != 3 || logits.shape[0] != labels.batch ||
      logits.shape[1] != labels.seq) {
    throw InvalidArgument("logits shape does not match the label batch");
  }
  const std::size_t B = labels.batch, S = labels.seq, V = logits.shape[2];
  LossGrad<T> out;
  if (want_grad) out.dlogits = Tensor<T>(logits.shape);
  double total = 0.0;
  std::size_t n = 0;
  std::vector<double> probs(V);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t + 1 < S; ++t) {
      const TokenId target = labels.at(b, t + 1);
      if (ignore_id && target == *ignore_id) continue;
      if (target >= V) throw InvalidArgument("label id out of range");
      const T* row = logits.data.data() + (b * S + t) * V;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0.0;
      for (std::size_t j = 0; j < V; ++j) {
        probs[j] = std::exp(static_cast<double>(row[j]) - mx);
        z += probs[j];
      }
      total += std::log(z) + mx - static_cast<double>(row[target]);
      ++n;
      if (want_grad) {
        T* drow = out.dlogits.data.data() + (b * S + t) * V;
        for (std::size_t j = 0; j < V; ++j) drow[j] = static_cast<T>(probs[j] / z);
        drow[target] -= T(1);
      }
    }
  }
  if (n == 0) throw InvalidArgument("no positions left to score after ignoring padding");
  out.positions = n;
  out.loss = static_cast<T>(total / static_cast<double>(n));
  if (want_grad) {
    const T inv = T(1) / static_cast<T>(n);
    for (auto& v : out.dlogits.data) v *= inv;
  }
  return out;
}

}  // namespace

template <typename T>
T ce_loss(const Tensor<T>& logits, const TokenBatch& labels, std::optional<TokenId> ignore_id) {
  return ce_impl(logits, labels, ignore_id, false).loss;
}

template <typename T>
LossGrad<T> ce_loss_grad(const Tensor<T>& logits, const TokenBatch& labels,
                         std::optional<TokenId> ignore_id) {
  return ce_impl(logits, labels, ignore_id, true);
}

template <typename T>
LossAndGrads<T> backward(const BasicCheckpoint<T>& ckpt, const TokenBatch& batch,
                         const ForwardMasks* masks, std::optional<TokenId> ignore_id) {
  ForwardPass<T> pass(ckpt, batch, masks);
  auto lg = ce_loss_grad(pass.logits(), batch, ignore_id);
  if (!std::isfinite(lg.loss)) throw NumericError("non-finite loss");
  return {lg.loss, pass.backward(lg.dlogits)};
}

#define FABLELM_INSTANTIATE(T)                                                                  \
  template void validate_checkpoint<T>(const BasicCheckpoint<T>&);                              \
  template class ForwardPass<T>;                                                                \
  template Tensor<T> forward<T>(const BasicCheckpoint<T>&, const TokenBatch&,                   \
                                const ForwardMasks*);                                           \
  template T ce_loss<T>(const Tensor<T>&, const TokenBatch&, std::optional<TokenId>);           \
  template LossGrad<T> ce_loss_grad<T>(const Tensor<T>&, const TokenBatch&,                     \
                                       std::optional<TokenId>);                                 \
  template LossAndGrads<T> backward<T>(const BasicCheckpoint<T>&, const TokenBatch&,            \
                                       const ForwardMasks*, std::optional<TokenId>);

FABLELM_INSTANTIATE(float)
FABLELM_INSTANTIATE(double)

#undef FABLELM_INSTANTIATE

}  // namespace fablelm
