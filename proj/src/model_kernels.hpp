#pragma once

// Dense kernels shared by the batched forward/backward and the cached
// decoder. Both paths must perform identical arithmetic in identical order so
// incremental decoding reproduces forward() exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "fablelm/model.hpp"

namespace fablelm::kernels {

// c[n x m] (+)= a[n x k] * b[k x m]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m,
            bool accumulate = false) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    if (!accumulate) std::fill(ci, ci + m, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[n x m] (+)= a[n x k] * b[m x k]^T
template <typename T>
void matmul_bt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m,
               bool accumulate = false) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const T* bj = b + j * k;
      T s = T(0);
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * m + j] = accumulate ? c[i * m + j] + s : s;
    }
  }
}

// c[k x m] += a[n x k]^T * b[n x m]
template <typename T>
void matmul_at_acc(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

// y = x / rms(x) * g per row; rms saved for backward.
template <typename T>
void rmsnorm(const T* x, const T* g, T* y, T* rms, std::size_t rows, std::size_t h) {
  for (std::size_t t = 0; t < rows; ++t) {
    const T* xr = x + t * h;
    T ss = T(0);
    for (std::size_t i = 0; i < h; ++i) ss += xr[i] * xr[i];
    const T r = std::sqrt(ss / static_cast<T>(h) + static_cast<T>(kRmsEpsilon));
    rms[t] = r;
    for (std::size_t i = 0; i < h; ++i) y[t * h + i] = xr[i] / r * g[i];
  }
}

// dx += d/dx, dg += d/dg of sum(dy * rmsnorm(x, g)).
template <typename T>
void rmsnorm_backward(const T* x, const T* g, const T* rms, const T* dy, T* dx, T* dg,
                      std::size_t rows, std::size_t h) {
  for (std::size_t t = 0; t < rows; ++t) {
    const T* xr = x + t * h;
    const T* dyr = dy + t * h;
    const T r = rms[t];
    T dot = T(0);
    for (std::size_t i = 0; i < h; ++i) {
      dot += g[i] * dyr[i] * xr[i];
      dg[i] += dyr[i] * xr[i] / r;
    }
    const T coef = dot / (static_cast<T>(h) * r * r * r);
    for (std::size_t i = 0; i < h; ++i) dx[t * h + i] += g[i] * dyr[i] / r - xr[i] * coef;
  }
}

/// cos/sin of position * theta^(-2i/d), [positions x d/2].
template <typename T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;

  RopeTable(std::size_t positions, std::size_t head_dim, double theta) : half(head_dim / 2) {
    cos.resize(positions * half);
    sin.resize(positions * half);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      for (std::size_t p = 0; p < positions; ++p) {
        const double angle = static_cast<double>(p) * freq;
        cos[p * half + i] = static_cast<T>(std::cos(angle));
        sin[p * half + i] = static_cast<T>(std::sin(angle));
      }
    }
  }
};

// Rotates every head of one row in place at position `pos`.
template <typename T>
void rope_row(T* row, std::size_t n_heads, std::size_t head_dim, const RopeTable<T>& tab,
              std::size_t pos) {
  const T* c = tab.cos.data() + pos * tab.half;
  const T* s = tab.sin.data() + pos * tab.half;
  for (std::size_t h = 0; h < n_heads; ++h) {
    T* v = row + h * head_dim;
    for (std::size_t i = 0; i < tab.half; ++i) {
      const T x0 = v[2 * i], x1 = v[2 * i + 1];
      v[2 * i] = x0 * c[i] - x1 * s[i];
      v[2 * i + 1] = x0 * s[i] + x1 * c[i];
    }
  }
}

// Transpose of rope_row (the inverse rotation).
template <typename T>
void rope_row_backward(T* row, std::size_t n_heads, std::size_t head_dim,
                       const RopeTable<T>& tab, std::size_t pos) {
  const T* c = tab.cos.data() + pos * tab.half;
  const T* s = tab.sin.data() + pos * tab.half;
  for (std::size_t h = 0; h < n_heads; ++h) {
    T* v = row + h * head_dim;
    for (std::size_t i = 0; i < tab.half; ++i) {
      const T g0 = v[2 * i], g1 = v[2 * i + 1];
      v[2 * i] = g0 * c[i] + g1 * s[i];
      v[2 * i + 1] = -g0 * s[i] + g1 * c[i];
    }
  }
}

// One query row attending over keys/values 0..n-1 (rows of width `hidden`).
// probs receives n_heads rows of length `stride`; out is overwritten.
template <typename T>
void attend_row(const T* q, const T* keys, const T* values, std::size_t n, std::size_t n_heads,
                std::size_t head_dim, const T* head_mask, T* probs, std::size_t stride, T* out) {
  const std::size_t hidden = n_heads * head_dim;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * head_dim;
    T* p = probs + h * stride;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t u = 0; u < n; ++u) {
      const T* k = keys + u * hidden + off;
      T s = T(0);
      for (std::size_t j = 0; j < head_dim; ++j) s += q[off + j] * k[j];
      p[u] = s * scale;
      mx = std::max(mx, p[u]);
    }
    T sum = T(0);
    for (std::size_t u = 0; u < n; ++u) {
      p[u] = std::exp(p[u] - mx);
      sum += p[u];
    }
    for (std::size_t u = 0; u < n; ++u) p[u] /= sum;
    T* o = out + off;
    std::fill(o, o + head_dim, T(0));
    for (std::size_t u = 0; u < n; ++u) {
      const T* v = values + u * hidden + off;
      for (std::size_t j = 0; j < head_dim; ++j) o[j] += p[u] * v[j];
    }
    const T m = head_mask[h];
    for (std::size_t j = 0; j < head_dim; ++j) o[j] *= m;
  }
}

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

template <typename T>
T silu(T z) {
  return z * sigmoid(z);
}

template <typename T>
struct LayerWeights {
  const T *attn_norm, *wq, *wk, *wv, *wo, *mlp_norm, *w_gate, *w_up, *w_down;
};

template <typename T>
struct Weights {
  const T* emb = nullptr;
  const T* final_norm = nullptr;
  const T* lm_head = nullptr;  // null when tied
  std::vector<LayerWeights<T>> layers;
};

template <typename T>
inline Weights<T> resolve(const BasicCheckpoint<T>& ckpt) {
  for (const auto& spec : parameter_specs(ckpt.config)) {
    const auto& t = ckpt.at(spec.name);
    if (t.shape != spec.shape) throw InvalidArgument("wrong shape for " + spec.name);
  }
  Weights<T> w;
  w.emb = ckpt.at(param::kTokenEmbedding).data.data();
  w.final_norm = ckpt.at(param::kFinalNorm).data.data();
  if (!ckpt.config.tie_embeddings) w.lm_head = ckpt.at(param::kLmHead).data.data();
  for (std::size_t l = 0; l < ckpt.config.n_layers; ++l) {
    auto p = [&](std::string_view n) { return ckpt.at(param::layer(l, n)).data.data(); };
    w.layers.push_back({p("attn_norm"), p("wq"), p("wk"), p("wv"), p("wo"), p("mlp_norm"),
                        p("w_gate"), p("w_up"), p("w_down")});
  }
  return w;
}

// Mask values converted to T, ones when no masks are given.
template <typename T>
struct MaskValues {
  std::vector<std::vector<T>> mlp, heads;

  MaskValues(const ModelConfig& c, const ForwardMasks* masks) {
    if (masks != nullptr) masks->validate(c);
    mlp.assign(c.n_layers, std::vector<T>(c.mlp_dim, T(1)));
    heads.assign(c.n_layers, std::vector<T>(c.n_heads, T(1)));
    if (masks == nullptr) return;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      std::copy(masks->mlp[l].begin(), masks->mlp[l].end(), mlp[l].begin());
      std::copy(masks->heads[l].begin(), masks->heads[l].end(), heads[l].begin());
    }
  }
};

}  // namespace fablelm::kernels
