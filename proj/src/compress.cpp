#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "fablelm/compress.hpp"
#include "fablelm/eval.hpp"

namespace fablelm {

void PruneConfig::validate() const {
  if (!(mlp_rate >= 0.0 && mlp_rate <= 1.0) || !(head_rate >= 0.0 && head_rate <= 1.0)) {
    throw InvalidArgument("pruning rates must lie in [0, 1]");
  }
}

std::size_t pruned_units(double rate, std::size_t n) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidArgument("pruning rate must lie in [0, 1]");
  return std::min(n, static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9)));
}

std::vector<double> neuron_scores(const Checkpoint& ckpt, std::size_t layer) {
  const auto& c = ckpt.config;
  if (layer >= c.n_layers) throw InvalidArgument("layer out of range");
  const std::size_t H = c.hidden, M = c.mlp_dim;
  const auto& gate = ckpt.at(param::layer(layer, "w_gate")).data;
  const auto& up = ckpt.at(param::layer(layer, "w_up")).data;
  const auto& down = ckpt.at(param::layer(layer, "w_down")).data;
  std::vector<double> ss(M, 0.0);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < M; ++j) {
      const double g = gate[i * M + j], u = up[i * M + j];
      ss[j] += g * g + u * u;
    }
  }
  for (std::size_t j = 0; j < M; ++j) {
    for (std::size_t i = 0; i < H; ++i) {
      const double d = down[j * H + i];
      ss[j] += d * d;
    }
  }
  for (auto& v : ss) v = std::sqrt(v);
  return ss;
}

std::vector<double> head_scores(const Checkpoint& ckpt, std::size_t layer) {
  const auto& c = ckpt.config;
  if (layer >= c.n_layers) throw InvalidArgument("layer out of range");
  const std::size_t H = c.hidden, d = c.head_dim;
  const auto& wo = ckpt.at(param::layer(layer, "wo")).data;
  std::vector<double> out(c.n_heads, 0.0);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    double ss = 0.0;
    for (std::size_t r = h * d; r < (h + 1) * d; ++r) {
      for (std::size_t j = 0; j < H; ++j) ss += static_cast<double>(wo[r * H + j]) * wo[r * H + j];
    }
    out[h] = std::sqrt(ss);
  }
  return out;
}

namespace {

std::vector<std::size_t> lowest(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  idx.resize(k);
  return idx;
}

std::vector<std::size_t> random_subset(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  shuffle(idx, rng);
  idx.resize(k);
  return idx;
}

}  // namespace

ForwardMasks build_masks(const Checkpoint& ckpt, const PruneConfig& config) {
  config.validate();
  const auto& c = ckpt.config;
  ForwardMasks masks = ForwardMasks::ones(c);
  const std::size_t kn = pruned_units(config.mlp_rate, c.mlp_dim);
  const std::size_t kh = pruned_units(config.head_rate, c.n_heads);
  Rng rng(config.seed);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::vector<std::size_t> neurons, heads;
    if (config.selection == Selection::kMagnitude) {
      if (kn > 0) neurons = lowest(neuron_scores(ckpt, l), kn);
      if (kh > 0) heads = lowest(head_scores(ckpt, l), kh);
    } else {
      neurons = random_subset(c.mlp_dim, kn, rng);
      heads = random_subset(c.n_heads, kh, rng);
    }
    for (const auto j : neurons) masks.mlp[l][j] = 0.0f;
    for (const auto h : heads) masks.heads[l][h] = 0.0f;
  }
  return masks;
}

std::uint64_t pruned_params(const ModelConfig& c, const ForwardMasks& masks) {
  masks.validate(c);
  return std::uint64_t{3} * c.hidden * masks.masked_neurons() +
         std::uint64_t{4} * c.hidden * c.head_dim * masks.masked_heads();
}

const SweepPoint* SweepResult::find(double mlp_rate, double head_rate) const {
  for (const auto& p : points) {
    if (p.mlp_rate == mlp_rate && p.head_rate == head_rate) return &p;
  }
  return nullptr;
}

std::string SweepResult::to_json() const {
  nlohmann::json j;
  j["baseline_ce"] = baseline_ce;
  j["points"] = nlohmann::json::array();
  for (const auto& p : points) {
    j["points"].push_back({{"mlp_rate", p.mlp_rate},
                           {"head_rate", p.head_rate},
                           {"ce", p.ce},
                           {"ppl", p.ppl},
                           {"delta_ce_pct", p.delta_ce_pct},
                           {"pruned_params", p.pruned_params}});
  }
  return j.dump(2) + "\n";
}

SweepResult SweepResult::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SweepResult r;
    r.baseline_ce = j.at("baseline_ce").get<double>();
    for (const auto& p : j.at("points")) {
      r.points.push_back({p.at("mlp_rate").get<double>(), p.at("head_rate").get<double>(),
                          p.at("ce").get<double>(), p.at("ppl").get<double>(),
                          p.at("delta_ce_pct").get<double>(),
                          p.at("pruned_params").get<std::uint64_t>()});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sweep JSON: ") + e.what());
  }
}

SweepResult prune_sweep(const Checkpoint& ckpt, const PackedDataset& eval_blocks,
                        const std::vector<double>& mlp_rates,
                        const std::vector<double>& head_rates, const SweepOptions& options) {
  if (eval_blocks.block_count() == 0) throw InvalidArgument("sweep needs evaluation blocks");
  if (mlp_rates.empty() || head_rates.empty()) throw InvalidArgument("sweep needs rates on both axes");
  SweepResult r;
  const ForwardMasks ones = ForwardMasks::ones(ckpt.config);
  r.baseline_ce = intrinsic(ckpt, eval_blocks, &ones, options.batch, options.max_blocks).ce;
  for (const double mr : mlp_rates) {
    for (const double hr : head_rates) {
      const PruneConfig pc{mr, hr, options.selection, options.seed};
      const ForwardMasks masks = build_masks(ckpt, pc);
      const auto ev = intrinsic(ckpt, eval_blocks, &masks, options.batch, options.max_blocks);
      SweepPoint p;
      p.mlp_rate = mr;
      p.head_rate = hr;
      p.ce = ev.ce;
      p.ppl = ev.ppl;
      p.delta_ce_pct = 100.0 * (ev.ce - r.baseline_ce) / r.baseline_ce;
      p.pruned_params = pruned_params(ckpt.config, masks);
      r.points.push_back(p);
    }
  }
  return r;
}

PruneConfig select_config(const SweepResult& sweep, double budget_pct, bool include_unpruned) {
  if (sweep.points.empty()) throw InvalidArgument("empty sweep");
  const SweepPoint* best = nullptr;
  for (const auto& p : sweep.points) {
    if (!include_unpruned && p.mlp_rate == 0.0 && p.head_rate == 0.0) continue;
    if (!(p.delta_ce_pct <= budget_pct)) continue;
    const bool better =
        best == nullptr || p.pruned_params > best->pruned_params ||
        (p.pruned_params == best->pruned_params &&
         (p.mlp_rate > best->mlp_rate ||
          (p.mlp_rate == best->mlp_rate && p.head_rate > best->head_rate)));
    if (better) best = &p;
  }
  if (best == nullptr) {
    throw InvalidArgument("no sweep point stays within a " + std::to_string(budget_pct) +
                          "% loss increase");
  }
  return PruneConfig{best->mlp_rate, best->head_rate, Selection::kMagnitude, 0};
}

// ---- Distillation -------------------------------------------------------------

void DistillConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0) throw InvalidArgument("alpha and beta must be >= 0");
  if (alpha == 0.0 && beta == 0.0) throw InvalidArgument("alpha and beta cannot both be 0");
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  train.resolved().validate();
}

DistillConfig DistillConfig::from_kv(const KvConfig& kv) {
  DistillConfig c;
  c.alpha = kv.get_double("alpha", c.alpha);
  c.beta = kv.get_double("beta", c.beta);
  c.temperature = kv.get_double("temperature", c.temperature);
  KvConfig rest;
  for (const auto& [k, v] : kv.values()) {
    if (k != "alpha" && k != "beta" && k != "temperature") rest.set(k, v);
  }
  c.train = TrainConfig::from_kv(rest);
  return c;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("KL needs distributions of equal length");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

namespace {

// Softmax of row / temperature in double, also returning log-probabilities.
void softmax_row(const float* row, std::size_t V, double temperature, std::vector<double>& p,
                 std::vector<double>& logp) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]) / temperature);
  double z = 0.0;
  for (std::size_t j = 0; j < V; ++j) {
    p[j] = std::exp(static_cast<double>(row[j]) / temperature - mx);
    z += p[j];
  }
  const double logz = std::log(z);
  for (std::size_t j = 0; j < V; ++j) {
    p[j] /= z;
    logp[j] = static_cast<double>(row[j]) / temperature - mx - logz;
  }
}

}  // namespace

DistillLoss distill_loss(const Tensor<float>& student, const Tensor<float>& teacher,
                         const TokenBatch& labels, double alpha, double beta, double temperature,
                         std::optional<TokenId> ignore_id) {
  if (student.shape != teacher.shape) throw InvalidArgument("student/teacher logits differ in shape");
  if (student.shape.size() != 3 || student.shape[0] != labels.batch ||
      student.shape[1] != labels.seq) {
    throw InvalidArgument("logits shape does not match the label batch");
  }
  if (!(temperature > 0.0)) throw InvalidArgument("temperature must be > 0");
  const std::size_t B = labels.batch, S = labels.seq, V = student.shape[2];
  DistillLoss out;
  out.dlogits = Tensor<float>(student.shape);
  std::vector<double> ps(V), lps(V), pt(V), lpt(V), p1(V), lp1(V);
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t + 1 < S; ++t) {
      const TokenId target = labels.at(b, t + 1);
      if (ignore_id && target == *ignore_id) continue;
      if (target >= V) throw InvalidArgument("label id out of range");
      rows.push_back(b * S + t);
    }
  }
  if (rows.empty()) throw InvalidArgument("no positions left to score after ignoring padding");
  const double n = static_cast<double>(rows.size());
  const double t2 = temperature * temperature;
  double kl_sum = 0.0, ce_sum = 0.0;
  for (const std::size_t r : rows) {
    const float* s_row = student.data.data() + r * V;
    const float* t_row = teacher.data.data() + r * V;
    const TokenId target = labels.ids[r + 1];
    softmax_row(s_row, V, temperature, ps, lps);
    softmax_row(t_row, V, temperature, pt, lpt);
    softmax_row(s_row, V, 1.0, p1, lp1);
    double kl = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      if (pt[j] > 0.0) kl += pt[j] * (lpt[j] - lps[j]);
    }
    kl_sum += kl;
    ce_sum -= lp1[target];
    float* d = out.dlogits.data.data() + r * V;
    for (std::size_t j = 0; j < V; ++j) {
      const double g_kl = alpha * temperature * (ps[j] - pt[j]);
      const double g_ce = beta * (p1[j] - (j == target ? 1.0 : 0.0));
      d[j] = static_cast<float>((g_kl + g_ce) / n);
    }
  }
  out.positions = rows.size();
  out.kl = t2 * kl_sum / n;
  out.ce = ce_sum / n;
  out.total = alpha * out.kl + beta * out.ce;
  return out;
}

TrainResult distill(const Checkpoint& teacher, const ModelConfig& student_config,
                    const PackedDataset& data, const DistillConfig& config,
                    const TrainHooks& hooks) {
  config.validate();
  student_config.validate();
  if (teacher.config.vocab_size != student_config.vocab_size) {
    throw InvalidArgument("teacher vocab " + std::to_string(teacher.config.vocab_size) +
                          " differs from student vocab " +
                          std::to_string(student_config.vocab_size));
  }
  if (data.vocab_size() != student_config.vocab_size) {
    throw InvalidArgument("dataset vocab does not match the student");
  }
  const auto [train, heldout] = split_holdout(data);
  LossFn fn = [&](const Checkpoint& student, const TokenBatch& batch) {
    const Tensor<float> t_logits = forward(teacher, batch);
    ForwardPass<float> pass(student, batch);
    auto dl = distill_loss(pass.logits(), t_logits, batch, config.alpha, config.beta,
                           config.temperature);
    if (!std::isfinite(dl.total)) throw NumericError("non-finite distillation loss");
    return MicroStep{dl.total, dl.ce, pass.backward(dl.dlogits)};
  };
  return train_loop(init_checkpoint(student_config, config.train.seed), train, heldout,
                    config.train, fn, hooks);
}

}  // namespace fablelm
