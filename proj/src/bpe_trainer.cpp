#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <unordered_map>

#include "fablelm/tokenizer.hpp"
#include "fablelm/utf8.hpp"

namespace fablelm {
namespace {

using Symbol = std::uint32_t;

std::uint64_t key_of(Symbol a, Symbol b) { return (static_cast<std::uint64_t>(a) << 32) | b; }

class BpeTrainer {
 public:
  BpeTrainer(const std::vector<Document>& corpus, std::size_t target_vocab)
      : target_(target_vocab), queue_(PairOrder{&pieces_}) {
    std::map<std::string, std::uint64_t> word_counts;
    for (const auto& doc : corpus) {
      for (auto& w : pre_tokenize(doc.text)) ++word_counts[std::move(w)];
    }
    std::set<std::string> chars;
    for (const auto& [w, _] : word_counts) {
      for (auto& c : utf8::split_chars(w)) chars.insert(std::move(c));
    }
    if (target_ <= kNumSpecial + chars.size()) {
      throw InvalidArgument("target vocabulary " + std::to_string(target_) +
                            " cannot hold the 4 special tokens and " +
                            std::to_string(chars.size()) + " base symbols");
    }
    for (const auto& c : chars) add_piece(c);
    for (const auto& [w, count] : word_counts) {
      std::vector<Symbol> syms;
      for (const auto& c : utf8::split_chars(w)) syms.push_back(index_.at(c));
      words_.push_back(std::move(syms));
      freq_.push_back(count);
    }
    for (std::uint32_t wi = 0; wi < words_.size(); ++wi) add_word_pairs(wi, +1);
  }

  TokenizerModel run() {
    std::vector<std::uint32_t> stamp(words_.size(), 0);
    std::uint32_t round = 0;
    while (kNumSpecial + pieces_.size() < target_ && !queue_.empty()) {
      const auto top = *queue_.begin();
      if (top.count < 2) break;
      const Symbol a = top.left, b = top.right;
      const std::string merged_text = pieces_[a] + pieces_[b];
      const auto found = index_.find(merged_text);
      const Symbol merged = found != index_.end() ? found->second : add_piece(merged_text);
      merges_.emplace_back(pieces_[a], pieces_[b]);

      ++round;
      // Copy: add_word_pairs appends to the same map.
      const auto touched = pair_words_[key_of(a, b)];
      for (const auto wi : touched) {
        if (stamp[wi] == round) continue;
        stamp[wi] = round;
        add_word_pairs(wi, -1);
        apply_merge(words_[wi], a, b, merged);
        add_word_pairs(wi, +1);
      }
      pair_words_.erase(key_of(a, b));
    }

    std::vector<Piece> out;
    out.reserve(pieces_.size());
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      out.push_back({pieces_[i], -static_cast<double>(i)});
    }
    return TokenizerModel::bpe(std::move(out), std::move(merges_));
  }

  static void apply_merge(std::vector<Symbol>& syms, Symbol a, Symbol b, Symbol merged) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < syms.size(); ++r) {
      if (r + 1 < syms.size() && syms[r] == a && syms[r + 1] == b) {
        syms[w++] = merged;
        ++r;
      } else {
        syms[w++] = syms[r];
      }
    }
    syms.resize(w);
  }

 private:
  struct PairEntry {
    std::int64_t count;
    Symbol left;
    Symbol right;
  };
  // Highest count first, then lexicographically smallest (left, right) text.
  struct PairOrder {
    const std::vector<std::string>* pieces;
    bool operator()(const PairEntry& x, const PairEntry& y) const {
      if (x.count != y.count) return x.count > y.count;
      const auto& p = *pieces;
      if (x.left != y.left) return p[x.left] < p[y.left];
      return p[x.right] < p[y.right];
    }
  };

  Symbol add_piece(const std::string& text) {
    const auto id = static_cast<Symbol>(pieces_.size());
    pieces_.push_back(text);
    index_.emplace(text, id);
    return id;
  }

  void adjust(Symbol a, Symbol b, std::int64_t delta) {
    const auto key = key_of(a, b);
    auto& count = counts_[key];
    if (count > 0) queue_.erase(PairEntry{count, a, b});
    count += delta;
    if (count > 0) queue_.insert(PairEntry{count, a, b});
  }

  void add_word_pairs(std::uint32_t wi, int sign) {
    const auto& syms = words_[wi];
    const auto delta = sign * static_cast<std::int64_t>(freq_[wi]);
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      adjust(syms[i], syms[i + 1], delta);
      if (sign > 0) pair_words_[key_of(syms[i], syms[i + 1])].push_back(wi);
    }
  }

  std::size_t target_;
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, Symbol> index_;
  std::vector<std::vector<Symbol>> words_;
  std::vector<std::uint64_t> freq_;
  std::unordered_map<std::uint64_t, std::int64_t> counts_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> pair_words_;
  std::set<PairEntry, PairOrder> queue_;
  std::vector<MergeRule> merges_;
};

}  // namespace

TokenizerModel train_bpe(const std::vector<Document>& corpus, std::size_t target_vocab) {
  if (corpus.empty()) throw InvalidArgument("cannot train BPE on an empty corpus");
  return BpeTrainer(corpus, target_vocab).run();
}

}  // namespace fablelm
