#include <algorithm>
#include <cmath>
#include <numeric>

#include "fablelm/model.hpp"
#include "model_kernels.hpp"

namespace fablelm {

namespace k = kernels;

struct DecodeSession::State {
  const Checkpoint* ckpt;
  k::Weights<float> w;
  k::MaskValues<float> masks;
  k::RopeTable<float> rope;
  std::vector<std::vector<float>> keys, values;  // per layer, [position x hidden]
  std::vector<float> logits;
  std::size_t pos = 0;

  State(const Checkpoint& c, const ForwardMasks* m)
      : ckpt(&c),
        w(k::resolve(c)),
        masks(c.config, m),
        rope(c.config.max_seq, c.config.head_dim, c.config.rope_theta),
        keys(c.config.n_layers),
        values(c.config.n_layers),
        logits(c.config.vocab_size) {}
};

DecodeSession::DecodeSession(const Checkpoint& ckpt, const ForwardMasks* masks)
    : state_(std::make_unique<State>(ckpt, masks)) {}
DecodeSession::~DecodeSession() = default;
DecodeSession::DecodeSession(DecodeSession&&) noexcept = default;

std::size_t DecodeSession::position() const { return state_->pos; }

std::span<const float> DecodeSession::step(TokenId id) {
  State& s = *state_;
  const auto& c = s.ckpt->config;
  const std::size_t H = c.hidden, M = c.mlp_dim, V = c.vocab_size;
  const std::size_t nh = c.n_heads, d = c.head_dim;
  if (s.pos >= c.max_seq) throw InvalidArgument("context is full (max_seq reached)");
  if (id >= V) throw InvalidArgument("token id " + std::to_string(id) + " out of range");

  std::vector<float> x(s.w.emb + std::size_t{id} * H, s.w.emb + std::size_t{id} * H + H);
  std::vector<float> a(H), q(H), kk(H), vv(H), o(H), tmp(H), b(H);
  std::vector<float> gate(M), up(M), hmid(M), probs(nh * (s.pos + 1));
  float rms = 0.0f;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& lw = s.w.layers[l];
    k::rmsnorm(x.data(), lw.attn_norm, a.data(), &rms, 1, H);
    k::matmul(a.data(), lw.wq, q.data(), 1, H, H);
    k::matmul(a.data(), lw.wk, kk.data(), 1, H, H);
    k::matmul(a.data(), lw.wv, vv.data(), 1, H, H);
    k::rope_row(q.data(), nh, d, s.rope, s.pos);
    k::rope_row(kk.data(), nh, d, s.rope, s.pos);
    s.keys[l].insert(s.keys[l].end(), kk.begin(), kk.end());
    s.values[l].insert(s.values[l].end(), vv.begin(), vv.end());
    k::attend_row(q.data(), s.keys[l].data(), s.values[l].data(), s.pos + 1, nh, d,
                  s.masks.heads[l].data(), probs.data(), s.pos + 1, o.data());
    k::matmul(o.data(), lw.wo, tmp.data(), 1, H, H);
    for (std::size_t i = 0; i < H; ++i) x[i] += tmp[i];

    k::rmsnorm(x.data(), lw.mlp_norm, b.data(), &rms, 1, H);
    k::matmul(b.data(), lw.w_gate, gate.data(), 1, H, M);
    k::matmul(b.data(), lw.w_up, up.data(), 1, H, M);
    const float* mm = s.masks.mlp[l].data();
    for (std::size_t j = 0; j < M; ++j) hmid[j] = k::silu(gate[j]) * up[j] * mm[j];
    k::matmul(hmid.data(), lw.w_down, tmp.data(), 1, M, H);
    for (std::size_t i = 0; i < H; ++i) x[i] += tmp[i];
  }
  k::rmsnorm(x.data(), s.w.final_norm, a.data(), &rms, 1, H);
  if (s.w.lm_head == nullptr) {
    k::matmul_bt(a.data(), s.w.emb, s.logits.data(), 1, H, V);
  } else {
    k::matmul(a.data(), s.w.lm_head, s.logits.data(), 1, H, V);
  }
  ++s.pos;
  return s.logits;
}

TokenId sample_token(std::span<const float> logits, double temperature, std::size_t top_k,
                     Rng& rng) {
  if (logits.empty()) throw InvalidArgument("cannot sample from empty logits");
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("temperature must be a finite number >= 0");
  }
  if (temperature == 0.0) {
    // max_element returns the first maximum, i.e. the lowest id on ties.
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  if (top_k == 0) throw InvalidArgument("top_k must be >= 1");
  const std::size_t n = std::min(top_k, logits.size());
  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](TokenId x, TokenId y) {
                      return logits[x] != logits[y] ? logits[x] > logits[y] : x < y;
                    });
  const double top = logits[order[0]];
  std::vector<double> weights(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    weights[i] = std::exp((static_cast<double>(logits[order[i]]) - top) / temperature);
    total += weights[i];
  }
  const double u = uniform01(rng) * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    cum += weights[i];
    if (u < cum) return order[i];
  }
  return order[n - 1];
}

std::vector<TokenId> generate(const Checkpoint& ckpt, std::span<const TokenId> prompt,
                              const GenerateOptions& options, const ForwardMasks* masks) {
  if (prompt.empty()) throw InvalidArgument("generation needs a non-empty prompt");
  if (prompt.size() > ckpt.config.max_seq) throw InvalidArgument("prompt longer than max_seq");
  if (options.temperature > 0.0 && options.top_k == 0) throw InvalidArgument("top_k must be >= 1");
  DecodeSession session(ckpt, masks);
  std::span<const float> logits;
  for (const TokenId id : prompt) logits = session.step(id);
  Rng rng(options.seed);
  std::vector<TokenId> out;
  // prompt + output never exceeds max_seq, so the result can be fed back whole.
  const auto room = [&] { return prompt.size() + out.size() < ckpt.config.max_seq; };
  while (out.size() < options.max_new && room()) {
    const TokenId next = sample_token(logits, options.temperature, options.top_k, rng);
    if (options.stop_at_eos && next == options.eos_id) break;
    out.push_back(next);
    if (out.size() == options.max_new || !room()) break;
    logits = session.step(next);
  }
  return out;
}

}  // namespace fablelm
