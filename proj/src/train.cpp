#include "fablelm/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fablelm/eval.hpp"

namespace fablelm {

using nlohmann::json;

TrainConfig TrainConfig::resolved() const {
  TrainConfig c = *this;
  if (c.warmup_steps == 0) c.warmup_steps = std::max<std::size_t>(1, c.total_steps / 50);
  return c;
}

void TrainConfig::validate() const {
  if (total_steps == 0) throw InvalidArgument("total_steps must be >= 1");
  if (warmup_steps == 0 || warmup_steps > total_steps) {
    throw InvalidArgument("warmup_steps must be in [1, total_steps]");
  }
  if (!(peak_lr > 0.0)) throw InvalidArgument("peak_lr must be > 0");
  if (accum_steps == 0 || micro_batch == 0) {
    throw InvalidArgument("micro_batch and accum_steps must be >= 1");
  }
  if (weight_decay < 0.0) throw InvalidArgument("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgument("betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw InvalidArgument("eps must be > 0");
  if (grad_clip < 0.0) throw InvalidArgument("grad_clip must be >= 0");
}

TrainConfig TrainConfig::from_kv(const KvConfig& kv) {
  kv.require_known({"peak_lr", "warmup_steps", "total_steps", "weight_decay", "beta1", "beta2",
                    "eps", "micro_batch", "accum_steps", "seed", "eval_every", "eval_max_blocks",
                    "grad_clip", "patience"});
  TrainConfig c;
  c.peak_lr = kv.get_double("peak_lr", c.peak_lr);
  c.warmup_steps = kv.get_u64("warmup_steps", c.warmup_steps);
  c.total_steps = kv.get_u64("total_steps", c.total_steps);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.eps = kv.get_double("eps", c.eps);
  c.micro_batch = kv.get_u64("micro_batch", c.micro_batch);
  c.accum_steps = kv.get_u64("accum_steps", c.accum_steps);
  c.seed = kv.get_u64("seed", c.seed);
  c.eval_every = kv.get_u64("eval_every", c.eval_every);
  c.eval_max_blocks = kv.get_u64("eval_max_blocks", c.eval_max_blocks);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.patience = kv.get_u64("patience", c.patience);
  return c;
}

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

KvConfig TrainConfig::to_kv() const {
  KvConfig kv;
  kv.set("peak_lr", fmt_double(peak_lr));
  kv.set("warmup_steps", std::to_string(warmup_steps));
  kv.set("total_steps", std::to_string(total_steps));
  kv.set("weight_decay", fmt_double(weight_decay));
  kv.set("beta1", fmt_double(beta1));
  kv.set("beta2", fmt_double(beta2));
  kv.set("eps", fmt_double(eps));
  kv.set("micro_batch", std::to_string(micro_batch));
  kv.set("accum_steps", std::to_string(accum_steps));
  kv.set("seed", std::to_string(seed));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("eval_max_blocks", std::to_string(eval_max_blocks));
  kv.set("grad_clip", fmt_double(grad_clip));
  kv.set("patience", std::to_string(patience));
  return kv;
}

ModelConfig model_config_from_kv(const KvConfig& kv) {
  kv.require_known({"preset", "vocab_size", "n_layers", "hidden", "n_heads", "head_dim", "mlp_dim",
                    "max_seq", "tie_embeddings", "rope_theta"});
  ModelConfig c;
  const std::string preset = kv.get_string("preset", "teacher");
  if (preset == "teacher") {
    c = ModelConfig::teacher();
  } else if (preset == "student") {
    c = ModelConfig::student();
  } else {
    throw InvalidArgument("unknown model preset '" + preset + "' (expected teacher or student)");
  }
  auto u32 = [&](const char* key, std::uint32_t fallback) {
    const auto v = kv.get_u64(key, fallback);
    if (v > UINT32_MAX) throw InvalidArgument(std::string("config key ") + key + " too large");
    return static_cast<std::uint32_t>(v);
  };
  c.vocab_size = u32("vocab_size", c.vocab_size);
  c.n_layers = u32("n_layers", c.n_layers);
  c.hidden = u32("hidden", c.hidden);
  c.n_heads = u32("n_heads", c.n_heads);
  c.head_dim = u32("head_dim", c.head_dim);
  c.mlp_dim = u32("mlp_dim", c.mlp_dim);
  c.max_seq = u32("max_seq", c.max_seq);
  c.tie_embeddings = kv.get_bool("tie_embeddings", c.tie_embeddings);
  c.rope_theta = kv.get_double("rope_theta", c.rope_theta);
  c.validate();
  return c;
}

KvConfig model_config_to_kv(const ModelConfig& c) {
  KvConfig kv;
  kv.set("vocab_size", std::to_string(c.vocab_size));
  kv.set("n_layers", std::to_string(c.n_layers));
  kv.set("hidden", std::to_string(c.hidden));
  kv.set("n_heads", std::to_string(c.n_heads));
  kv.set("head_dim", std::to_string(c.head_dim));
  kv.set("mlp_dim", std::to_string(c.mlp_dim));
  kv.set("max_seq", std::to_string(c.max_seq));
  kv.set("tie_embeddings", c.tie_embeddings ? "true" : "false");
  kv.set("rope_theta", fmt_double(c.rope_theta));
  return kv;
}

double lr_at(const TrainConfig& config, std::size_t step) {
  const TrainConfig c = config.resolved();
  c.validate();
  if (step > c.total_steps) {
    throw InvalidArgument("step " + std::to_string(step) + " outside [0, " +
                          std::to_string(c.total_steps) + "]");
  }
  const auto s = static_cast<double>(step);
  const auto w = static_cast<double>(c.warmup_steps);
  const auto t = static_cast<double>(c.total_steps);
  if (step <= c.warmup_steps) return c.peak_lr * s / w;
  return c.peak_lr * (t - s) / (t - w);
}

double global_norm(const TensorMap<float>& grads) {
  double ss = 0.0;
  for (const auto& [_, g] : grads) {
    for (const float v : g.data) ss += static_cast<double>(v) * v;
  }
  return std::sqrt(ss);
}

void adamw_step(TensorMap<float>& params, const TensorMap<float>& grads, AdamState& state,
                double lr, const TrainConfig& config) {
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    for (const float v : g.data) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite gradient in " + name + " at step " +
                           std::to_string(state.step));
      }
    }
  }
  for (auto& [name, p] : params) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw InvalidArgument("no gradient for " + name);
    const auto& g = git->second.data;
    if (g.size() != p.data.size()) throw InvalidArgument("gradient shape mismatch for " + name);
    auto& m = state.m[name].data;
    auto& v = state.v[name].data;
    if (m.empty()) {
      m.assign(p.data.size(), 0.0f);
      v.assign(p.data.size(), 0.0f);
    }
    const bool decay = config.weight_decay > 0.0 && !name.ends_with("norm");
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      double x = p.data[i];
      if (decay) x -= lr * config.weight_decay * x;
      const double gi = g[i];
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      x -= lr * (mi / c1) / (std::sqrt(vi / c2) + config.eps);
      p.data[i] = static_cast<float>(x);
    }
  }
}

// ---- RunLog -----------------------------------------------------------------

std::string RunLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    json j = {{"step", r.step},           {"lr", r.lr},
              {"loss", r.loss},           {"train_ce", r.train_ce},
              {"grad_norm", r.grad_norm}, {"tokens_per_sec", r.tokens_per_sec}};
    if (r.eval_ce) j["eval_ce"] = *r.eval_ce;
    if (r.eval_ppl) j["eval_ppl"] = *r.eval_ppl;
    out += j.dump() + "\n";
  }
  return out;
}

RunLog RunLog::from_jsonl(const std::string& text) {
  RunLog log;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      StepRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.lr = j.at("lr").get<double>();
      r.loss = j.at("loss").get<double>();
      r.train_ce = j.at("train_ce").get<double>();
      r.grad_norm = j.at("grad_norm").get<double>();
      r.tokens_per_sec = j.at("tokens_per_sec").get<double>();
      if (j.contains("eval_ce")) r.eval_ce = j["eval_ce"].get<double>();
      if (j.contains("eval_ppl")) r.eval_ppl = j["eval_ppl"].get<double>();
      log.records.push_back(r);
    } catch (const json::exception& e) {
      throw FormatError("run log line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return log;
}

void RunLog::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_jsonl();
  if (!out) throw IoError("write failed for " + path.string());
}

RunLog RunLog::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_jsonl(ss.str());
}

bool RunLog::same_trajectory(const RunLog& other) const {
  if (records.size() != other.records.size()) return false;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& a = records[i];
    const auto& b = other.records[i];
    if (a.step != b.step || a.lr != b.lr || a.loss != b.loss || a.train_ce != b.train_ce ||
        a.grad_norm != b.grad_norm || a.eval_ce != b.eval_ce || a.eval_ppl != b.eval_ppl) {
      return false;
    }
  }
  return true;
}

std::optional<double> RunLog::first_eval_ce() const {
  for (const auto& r : records) {
    if (r.eval_ce) return r.eval_ce;
  }
  return std::nullopt;
}

std::optional<double> RunLog::last_eval_ce() const {
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->eval_ce) return it->eval_ce;
  }
  return std::nullopt;
}

// ---- Data -------------------------------------------------------------------

std::pair<PackedDataset, PackedDataset> split_holdout(const PackedDataset& data) {
  const std::size_t n = data.block_count();
  if (n < 2) throw InvalidArgument("need at least 2 blocks to hold one out for evaluation");
  const std::size_t held = std::max<std::size_t>(1, n / 100);
  return {data.slice(0, n - held), data.slice(n - held, held)};
}

BlockSampler::BlockSampler(std::size_t block_count, std::uint64_t seed)
    : count_(block_count), rng_(seed) {
  if (block_count == 0) throw InvalidArgument("cannot sample from an empty dataset");
  reshuffle();
}

void BlockSampler::reshuffle() {
  order_.resize(count_);
  for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
  shuffle(order_, rng_);
  pos_ = 0;
}

std::vector<std::size_t> BlockSampler::next(std::size_t n) {
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    if (pos_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[pos_++]);
  }
  return out;
}

TokenBatch make_batch(const PackedDataset& data, const std::vector<std::size_t>& blocks) {
  std::vector<std::span<const TokenId>> rows;
  rows.reserve(blocks.size());
  for (const auto b : blocks) rows.push_back(data.block(b));
  return TokenBatch::from_rows(rows);
}

// ---- Loop -------------------------------------------------------------------

TrainResult train_loop(Checkpoint init, const PackedDataset& train, const PackedDataset& heldout,
                       const TrainConfig& config, const LossFn& loss_fn,
                       const TrainHooks& hooks) {
  const TrainConfig c = config.resolved();
  c.validate();
  if (train.vocab_size() != init.config.vocab_size) {
    throw InvalidArgument("dataset vocab " + std::to_string(train.vocab_size()) +
                          " does not match model vocab " +
                          std::to_string(init.config.vocab_size));
  }
  if (train.block_len() > init.config.max_seq) {
    throw InvalidArgument("block length exceeds the model's max_seq");
  }
  if (heldout.block_count() == 0) throw InvalidArgument("held-out set is empty");

  TrainResult result{std::move(init), {}, false, false};
  Checkpoint& ckpt = result.ckpt;
  AdamState adam;
  // Offset so the shuffle stream differs from the init stream of the same seed.
  BlockSampler sampler(train.block_count(), c.seed + 0x9E3779B97F4A7C15ull);
  double best_eval = std::numeric_limits<double>::infinity();
  std::size_t evals_since_best = 0;
  using Clock = std::chrono::steady_clock;

  for (std::size_t step = 1; step <= c.total_steps; ++step) {
    if (hooks.cancel != nullptr && hooks.cancel->load()) {
      result.cancelled = true;
      break;
    }
    const auto t0 = Clock::now();
    TensorMap<float> grads;
    double loss = 0.0, ce = 0.0;
    for (std::size_t a = 0; a < c.accum_steps; ++a) {
      const TokenBatch batch = make_batch(train, sampler.next(c.micro_batch));
      MicroStep ms = loss_fn(ckpt, batch);
      if (!std::isfinite(ms.loss)) {
        throw NumericError("non-finite loss at step " + std::to_string(step));
      }
      loss += ms.loss;
      ce += ms.ce;
      if (grads.empty()) {
        grads = std::move(ms.grads);
      } else {
        for (auto& [name, g] : grads) {
          const auto& add = ms.grads.at(name).data;
          for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += add[i];
        }
      }
    }
    const auto inv = static_cast<float>(1.0 / static_cast<double>(c.accum_steps));
    if (c.accum_steps > 1) {
      for (auto& [_, g] : grads) {
        for (auto& v : g.data) v *= inv;
      }
    }
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    if (c.grad_clip > 0.0 && norm > c.grad_clip) {
      const auto s = static_cast<float>(c.grad_clip / norm);
      for (auto& [_, g] : grads) {
        for (auto& v : g.data) v *= s;
      }
    }
    const double lr = lr_at(c, step);
    adamw_step(ckpt.tensors, grads, adam, lr, c);
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.loss = loss / static_cast<double>(c.accum_steps);
    rec.train_ce = ce / static_cast<double>(c.accum_steps);
    rec.grad_norm = norm;
    const double tokens =
        static_cast<double>(c.micro_batch * c.accum_steps) * static_cast<double>(train.block_len());
    rec.tokens_per_sec = secs > 0.0 ? tokens / secs : 0.0;

    const bool do_eval = step == 1 || step == c.total_steps ||
                         (c.eval_every > 0 && step % c.eval_every == 0);
    bool stop = false;
    if (do_eval) {
      const auto ev = intrinsic(ckpt, heldout, nullptr, c.micro_batch, c.eval_max_blocks);
      rec.eval_ce = ev.ce;
      rec.eval_ppl = ev.ppl;
      if (ev.ce < best_eval) {
        best_eval = ev.ce;
        evals_since_best = 0;
      } else if (c.patience > 0 && ++evals_since_best >= c.patience) {
        stop = true;
      }
    }
    result.log.records.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (do_eval && hooks.on_eval) hooks.on_eval(step, ckpt);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

TrainResult pretrain(const PackedDataset& data, const ModelConfig& model_config,
                     const TrainConfig& config, const TrainHooks& hooks) {
  model_config.validate();
  if (data.vocab_size() != model_config.vocab_size) {
    throw InvalidArgument("dataset vocab " + std::to_string(data.vocab_size()) +
                          " does not match model vocab " + std::to_string(model_config.vocab_size));
  }
  const auto [train, heldout] = split_holdout(data);
  LossFn fn = [](const Checkpoint& ckpt, const TokenBatch& batch) {
    auto lg = backward(ckpt, batch);
    return MicroStep{lg.loss, lg.loss, std::move(lg.grads)};
  };
  return train_loop(init_checkpoint(model_config, config.seed), train, heldout, config, fn, hooks);
}

}  // namespace fablelm
