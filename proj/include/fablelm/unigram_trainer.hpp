#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "fablelm/corpus.hpp"
#include "fablelm/tokenizer.hpp"

namespace fablelm {

/// Unigram LM vocabulary training, step by step. train_unigram() runs the
/// full schedule; the individual steps are public so tests can watch the
/// likelihood between them.
class UnigramTrainer {
 public:
  UnigramTrainer(const std::vector<Document>& corpus, const UnigramOptions& options);

  /// Corpus log-likelihood (nats) under the current piece probabilities,
  /// marginalized over all segmentations of every word.
  double log_likelihood() const;

  /// One EM iteration. Returns the log-likelihood before the update.
  double em_iteration();

  /// Drops up to prune_fraction of the prunable pieces, cheapest first, never
  /// going below the target. Returns the number removed.
  std::size_t prune_round();

  /// Specials included.
  std::size_t vocab_size() const { return kNumSpecial + pieces_.size(); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  const std::vector<double>& log_probs() const { return log_probs_; }
  bool is_char(std::size_t i) const { return is_char_[i] != 0; }

  /// Runs EM + pruning until the target is reached, then a final EM pass.
  void run();
  TokenizerModel to_model() const;

 private:
  struct Word {
    std::vector<std::string> chars;
    std::uint64_t count = 0;
  };
  struct Edge {
    std::uint32_t start;
    std::uint32_t end;
    std::uint32_t piece;
  };

  void rebuild_lattices();
  std::vector<std::uint32_t> best_path(const std::vector<std::string>& chars,
                                       std::int64_t excluded_piece) const;

  UnigramOptions options_;
  std::vector<Word> words_;
  std::vector<std::string> pieces_;
  std::vector<double> log_probs_;
  std::vector<char> is_char_;
  std::vector<std::vector<Edge>> lattices_;  // per word
  std::unordered_map<std::string, std::uint32_t> index_;
};

}  // namespace fablelm
