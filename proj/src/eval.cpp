#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "fablelm/eval.hpp"

namespace fablelm {

IntrinsicResult intrinsic(const Checkpoint& ckpt, const PackedDataset& blocks,
                          const ForwardMasks* masks, std::size_t batch, std::size_t max_blocks) {
  std::size_t n = blocks.block_count();
  if (max_blocks > 0) n = std::min(n, max_blocks);
  if (n == 0) throw InvalidArgument("cannot evaluate on zero blocks");
  if (batch == 0) throw InvalidArgument("evaluation batch must be >= 1");
  double total = 0.0;
  std::size_t positions = 0;
  for (std::size_t first = 0; first < n; first += batch) {
    std::vector<std::span<const TokenId>> rows;
    for (std::size_t b = first; b < std::min(n, first + batch); ++b) rows.push_back(blocks.block(b));
    const TokenBatch tb = TokenBatch::from_rows(rows);
    const auto logits = forward(ckpt, tb, masks);
    const std::size_t count = tb.batch * (tb.seq - 1);
    total += static_cast<double>(ce_loss(logits, tb)) * static_cast<double>(count);
    positions += count;
  }
  IntrinsicResult r;
  r.ce = total / static_cast<double>(positions);
  r.ppl = std::exp(r.ce);
  r.positions = positions;
  return r;
}

std::vector<MinimalPair> load_probes(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open probe file " + path.string());
  std::vector<MinimalPair> pairs;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      MinimalPair p{j.at("prefix").get<std::string>(), j.at("grammatical").get<std::string>(),
                    j.at("ungrammatical").get<std::string>(),
                    j.value("phenomenon", std::string("unspecified"))};
      if (p.grammatical.empty() || p.ungrammatical.empty() || p.grammatical == p.ungrammatical) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) +
                          ": continuations must be non-empty and differ");
      }
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

double continuation_logprob(const Checkpoint& ckpt, const TokenizerModel& tok,
                            const std::string& prefix, const std::string& continuation) {
  std::vector<TokenId> ids{tok.special().bos};
  const auto p = tok.encode(prefix);
  ids.insert(ids.end(), p.begin(), p.end());
  const auto c = tok.encode(continuation);
  if (c.empty()) throw InvalidArgument("continuation '" + continuation + "' encodes to no tokens");
  if (c.size() >= ckpt.config.max_seq) throw InvalidArgument("continuation longer than max_seq");
  std::size_t first = ids.size();  // index of the first continuation token
  ids.insert(ids.end(), c.begin(), c.end());
  if (ids.size() > ckpt.config.max_seq) {
    const std::size_t drop = ids.size() - ckpt.config.max_seq;
    ids.erase(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(drop));
    first -= drop;
  }
  const TokenBatch batch{1, ids.size(), ids};
  const auto logits = forward(ckpt, batch);
  const std::size_t V = ckpt.config.vocab_size;
  double total = 0.0;
  for (std::size_t t = first; t < ids.size(); ++t) {
    const float* row = logits.data.data() + (t - 1) * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    total += static_cast<double>(row[ids[t]]) - mx - std::log(z);
  }
  return total;
}

AgreementResult agreement(const Checkpoint& ckpt, const TokenizerModel& tok,
                          const std::vector<MinimalPair>& pairs) {
  if (pairs.empty()) throw InvalidArgument("agreement needs at least one minimal pair");
  AgreementResult r;
  std::size_t right = 0;
  for (const auto& p : pairs) {
    const bool ok = pair_correct(continuation_logprob(ckpt, tok, p.prefix, p.grammatical),
                                 continuation_logprob(ckpt, tok, p.prefix, p.ungrammatical));
    r.correct.push_back(ok);
    auto& [c, n] = r.by_phenomenon[p.phenomenon];
    c += ok ? 1 : 0;
    ++n;
    right += ok ? 1 : 0;
  }
  r.accuracy = static_cast<double>(right) / static_cast<double>(pairs.size());
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ThroughputResult throughput(const Checkpoint& ckpt, std::size_t prompt_len, std::size_t gen_len,
                            std::size_t batch, std::size_t repeats, std::uint64_t seed) {
  if (repeats == 0 || batch == 0 || gen_len == 0 || prompt_len == 0) {
    throw InvalidArgument("throughput needs prompt_len, gen_len, batch and repeats >= 1");
  }
  if (prompt_len + gen_len > ckpt.config.max_seq) {
    throw InvalidArgument("prompt_len + gen_len exceeds max_seq");
  }
  const std::size_t V = ckpt.config.vocab_size;
  if (V <= kNumSpecial) throw InvalidArgument("vocabulary has no ordinary tokens");
  Rng rng(seed);
  std::vector<std::vector<TokenId>> prompts(batch);
  for (auto& p : prompts) {
    for (std::size_t i = 0; i < prompt_len; ++i) {
      p.push_back(static_cast<TokenId>(kNumSpecial + uniform_below(rng, V - kNumSpecial)));
    }
  }
  GenerateOptions opt;
  opt.max_new = gen_len;
  opt.temperature = 0.0;
  opt.seed = seed;
  opt.stop_at_eos = false;

  auto run = [&] {
    std::size_t produced = 0;
    for (const auto& p : prompts) produced += generate(ckpt, p, opt).size();
    return produced;
  };
  ThroughputResult r;
  r.tokens_per_run = run();  // warmup
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t produced = run();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.samples.push_back(static_cast<double>(produced) / std::max(secs, 1e-9));
  }
  r.tokens_per_sec = median(r.samples);
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  if (ce) j["ce"] = *ce;
  if (ppl) j["ppl"] = *ppl;
  if (agreement_acc) j["agreement_acc"] = *agreement_acc;
  if (coherence) j["coherence"] = *coherence;
  if (grammar_score) j["grammar_score"] = *grammar_score;
  if (!distinct_n.empty()) {
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [n, v] : distinct_n) d[std::to_string(n)] = v;
    j["distinct_n"] = d;
  }
  if (self_bleu) j["self_bleu"] = *self_bleu;
  if (readability) j["readability"] = *readability;
  if (tokens_per_sec) j["tokens_per_sec"] = *tokens_per_sec;
  return j.dump(2) + "\n";
}

}  // namespace fablelm
