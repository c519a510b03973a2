#include "fablelm/unigram_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "fablelm/utf8.hpp"

namespace fablelm {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double x, double y) {
  if (x == kNegInf) return y;
  if (y == kNegInf) return x;
  const double hi = std::max(x, y);
  return hi + std::log1p(std::exp(std::min(x, y) - hi));
}

}  // namespace

UnigramTrainer::UnigramTrainer(const std::vector<Document>& corpus, const UnigramOptions& options)
    : options_(options) {
  options_.validate();
  if (corpus.empty()) throw InvalidArgument("cannot train a unigram model on an empty corpus");

  std::map<std::string, std::uint64_t> word_counts;
  for (const auto& doc : corpus) {
    for (auto& w : pre_tokenize(doc.text)) ++word_counts[std::move(w)];
  }
  std::map<std::string, std::uint64_t> char_counts;
  std::unordered_map<std::string, std::uint64_t> substring_counts;
  for (const auto& [w, count] : word_counts) {
    Word word{utf8::split_chars(w), count};
    const std::size_t n = word.chars.size();
    for (std::size_t i = 0; i < n; ++i) {
      char_counts[word.chars[i]] += count;
      std::string sub = word.chars[i];
      for (std::size_t len = 2; len <= options_.max_piece_chars && i + len <= n; ++len) {
        sub += word.chars[i + len - 1];
        substring_counts[sub] += count;
      }
    }
    words_.push_back(std::move(word));
  }
  if (options_.target_vocab < kNumSpecial + char_counts.size()) {
    throw InvalidArgument("target vocabulary " + std::to_string(options_.target_vocab) +
                          " is smaller than the " + std::to_string(char_counts.size()) +
                          " characters plus 4 special tokens");
  }

  // Seed: every character, then the most frequent longer substrings.
  std::vector<std::pair<std::string, std::uint64_t>> seed(substring_counts.begin(),
                                                          substring_counts.end());
  std::sort(seed.begin(), seed.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const auto seed_size = static_cast<std::size_t>(
      std::floor(options_.seed_multiplier * static_cast<double>(options_.target_vocab)));
  const std::size_t extra = seed_size > char_counts.size() ? seed_size - char_counts.size() : 0;
  if (seed.size() > extra) seed.resize(extra);

  std::vector<double> counts;
  for (const auto& [c, count] : char_counts) {
    pieces_.push_back(c);
    is_char_.push_back(1);
    counts.push_back(static_cast<double>(count));
  }
  for (auto& [s, count] : seed) {
    pieces_.push_back(std::move(s));
    is_char_.push_back(0);
    counts.push_back(static_cast<double>(count));
  }
  double total = 0.0;
  for (const double c : counts) total += c;
  for (const double c : counts) log_probs_.push_back(std::log(c / total));
  rebuild_lattices();
}

void UnigramTrainer::rebuild_lattices() {
  index_.clear();
  for (std::uint32_t i = 0; i < pieces_.size(); ++i) index_.emplace(pieces_[i], i);
  lattices_.assign(words_.size(), {});
  for (std::size_t wi = 0; wi < words_.size(); ++wi) {
    const auto& chars = words_[wi].chars;
    auto& edges = lattices_[wi];
    for (std::size_t i = 0; i < chars.size(); ++i) {
      std::string sub;
      for (std::size_t len = 1; len <= options_.max_piece_chars && i + len <= chars.size(); ++len) {
        sub += chars[i + len - 1];
        const auto it = index_.find(sub);
        if (it != index_.end()) {
          edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i + len),
                           it->second});
        }
      }
    }
  }
}

double UnigramTrainer::log_likelihood() const {
  double ll = 0.0;
  for (std::size_t wi = 0; wi < words_.size(); ++wi) {
    std::vector<double> alpha(words_[wi].chars.size() + 1, kNegInf);
    alpha[0] = 0.0;
    // Edges are sorted by start, so every alpha[start] is final when read.
    for (const auto& e : lattices_[wi]) {
      alpha[e.end] = log_add(alpha[e.end], alpha[e.start] + log_probs_[e.piece]);
    }
    ll += static_cast<double>(words_[wi].count) * alpha.back();
  }
  return ll;
}

double UnigramTrainer::em_iteration() {
  std::vector<double> expected(pieces_.size(), 0.0);
  double ll = 0.0;
  for (std::size_t wi = 0; wi < words_.size(); ++wi) {
    const auto& edges = lattices_[wi];
    const std::size_t n = words_[wi].chars.size();
    std::vector<double> alpha(n + 1, kNegInf), beta(n + 1, kNegInf);
    alpha[0] = 0.0;
    beta[n] = 0.0;
    for (const auto& e : edges) {
      alpha[e.end] = log_add(alpha[e.end], alpha[e.start] + log_probs_[e.piece]);
    }
    for (auto it = edges.rbegin(); it != edges.rend(); ++it) {
      beta[it->start] = log_add(beta[it->start], beta[it->end] + log_probs_[it->piece]);
    }
    const double z = alpha[n];
    const double count = static_cast<double>(words_[wi].count);
    ll += count * z;
    for (const auto& e : edges) {
      expected[e.piece] += count * std::exp(alpha[e.start] + log_probs_[e.piece] + beta[e.end] - z);
    }
  }

  // M step. Pieces whose expected count underflowed to zero carry no mass and
  // are dropped; characters are kept with a floor.
  std::vector<std::string> pieces;
  std::vector<char> is_char;
  std::vector<double> kept;
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (!is_char_[i] && expected[i] <= 0.0) continue;
    pieces.push_back(std::move(pieces_[i]));
    is_char.push_back(is_char_[i]);
    kept.push_back(std::max(expected[i], std::numeric_limits<double>::min()));
  }
  double total = 0.0;
  for (const double c : kept) total += c;
  const bool shrunk = pieces.size() != pieces_.size();
  pieces_ = std::move(pieces);
  is_char_ = std::move(is_char);
  log_probs_.clear();
  for (const double c : kept) log_probs_.push_back(std::log(c / total));
  if (shrunk) rebuild_lattices();
  return ll;
}

std::vector<std::uint32_t> UnigramTrainer::best_path(const std::vector<std::string>& chars,
                                                     std::int64_t excluded_piece) const {
  const std::size_t n = chars.size();
  std::vector<double> score(n + 1, kNegInf);
  std::vector<std::uint32_t> back_piece(n + 1, 0), back_start(n + 1, 0);
  score[0] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (score[i] == kNegInf) continue;
    std::string sub;
    for (std::size_t len = 1; len <= options_.max_piece_chars && i + len <= n; ++len) {
      sub += chars[i + len - 1];
      const auto it = index_.find(sub);
      if (it == index_.end() || static_cast<std::int64_t>(it->second) == excluded_piece) continue;
      const double s = score[i] + log_probs_[it->second];
      if (s > score[i + len]) {
        score[i + len] = s;
        back_piece[i + len] = it->second;
        back_start[i + len] = static_cast<std::uint32_t>(i);
      }
    }
  }
  std::vector<std::uint32_t> path;
  for (std::size_t pos = n; pos > 0; pos = back_start[pos]) path.push_back(back_piece[pos]);
  std::reverse(path.begin(), path.end());
  return path;
}

std::size_t UnigramTrainer::prune_round() {
  if (vocab_size() <= options_.target_vocab) return 0;

  // Viterbi usage of every piece across the corpus.
  std::vector<double> freq(pieces_.size(), 0.0);
  std::vector<double> word_mass(pieces_.size(), 0.0);  // summed counts of words using the piece
  double total_words = 0.0;
  for (const auto& w : words_) {
    const double count = static_cast<double>(w.count);
    total_words += count;
    auto path = best_path(w.chars, -1);
    for (const auto p : path) freq[p] += count;
    std::sort(path.begin(), path.end());
    path.erase(std::unique(path.begin(), path.end()), path.end());
    for (const auto p : path) word_mass[p] += count;
  }
  double sum = 0.0;
  for (const double f : freq) sum += f;
  const double log_sum = std::log(sum);

  // Loss of removing piece i: its occurrences are re-segmented into the best
  // alternative path, whose pieces absorb its frequency.
  std::vector<std::pair<double, std::uint32_t>> candidates;
  std::size_t prunable = 0;
  for (std::uint32_t i = 0; i < pieces_.size(); ++i) {
    if (is_char_[i]) continue;
    ++prunable;
    if (freq[i] == 0.0) {
      candidates.emplace_back(0.0, i);
      continue;
    }
    const auto alt = best_path(utf8::split_chars(pieces_[i]), i);
    const double share = word_mass[i] / total_words;
    const double logprob_piece = std::log(freq[i]) - log_sum;
    const double log_sum_alt = std::log(sum + freq[i] * (static_cast<double>(alt.size()) - 1.0));
    double logprob_alt = 0.0;
    for (const auto a : alt) logprob_alt += std::log(freq[a] + freq[i]) - log_sum_alt;
    candidates.emplace_back(share * (logprob_piece - logprob_alt), i);
  }
  std::sort(candidates.begin(), candidates.end(), [&](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : pieces_[a.second] < pieces_[b.second];
  });

  std::size_t drop = std::max<std::size_t>(
      1, static_cast<std::size_t>(options_.prune_fraction * static_cast<double>(prunable)));
  drop = std::min({drop, vocab_size() - options_.target_vocab, candidates.size()});
  std::set<std::uint32_t> removed;
  for (std::size_t k = 0; k < drop; ++k) removed.insert(candidates[k].second);

  std::vector<std::string> pieces;
  std::vector<char> is_char;
  std::vector<double> log_probs;
  for (std::uint32_t i = 0; i < pieces_.size(); ++i) {
    if (removed.count(i)) continue;
    pieces.push_back(std::move(pieces_[i]));
    is_char.push_back(is_char_[i]);
    log_probs.push_back(log_probs_[i]);
  }
  double norm = kNegInf;
  for (const double lp : log_probs) norm = log_add(norm, lp);
  for (double& lp : log_probs) lp -= norm;
  pieces_ = std::move(pieces);
  is_char_ = std::move(is_char);
  log_probs_ = std::move(log_probs);
  rebuild_lattices();
  return drop;
}

void UnigramTrainer::run() {
  while (vocab_size() > options_.target_vocab) {
    for (std::size_t it = 0; it < options_.em_iters; ++it) em_iteration();
    if (vocab_size() <= options_.target_vocab) break;
    prune_round();
  }
  for (std::size_t it = 0; it < options_.em_iters; ++it) em_iteration();
}

TokenizerModel UnigramTrainer::to_model() const {
  std::vector<Piece> out;
  out.reserve(pieces_.size());
  for (std::size_t i = 0; i < pieces_.size(); ++i) out.push_back({pieces_[i], log_probs_[i]});
  std::sort(out.begin(), out.end(), [](const Piece& a, const Piece& b) {
    return a.score != b.score ? a.score > b.score : a.text < b.text;
  });
  return TokenizerModel::unigram(std::move(out));
}

TokenizerModel train_unigram(const std::vector<Document>& corpus, const UnigramOptions& options) {
  UnigramTrainer trainer(corpus, options);
  trainer.run();
  return trainer.to_model();
}

}  // namespace fablelm
