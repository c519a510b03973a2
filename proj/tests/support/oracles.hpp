#pragma once

// Deliberately naive reference computations. Slow and obvious on purpose:
// they share no code with the library.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fablelm/model.hpp"

namespace fablelm::testing {

std::vector<std::string> naive_words(const std::string& text);

double naive_distinct_n(const std::vector<std::string>& texts, std::size_t n);

/// Sentence BLEU with clipped counts, (0+1)/(t+1) for an order with no
/// matches, and the brevity penalty against the closest reference length
/// (shorter on ties).
double naive_bleu(const std::vector<std::string>& hyp,
                  const std::vector<std::vector<std::string>>& refs, std::size_t max_n);
double naive_self_bleu(const std::vector<std::string>& texts, std::size_t max_n);

/// Entropy in nats over ln K.
double naive_normalized_entropy(const std::vector<std::string>& labels);

double naive_flesch(double words, double sentences, double syllables);

/// Exhaustive best segmentation of `chars` (one string per code point) into
/// pieces from `scores`. Ties prefer fewer pieces, then the longer first
/// piece, then the longer second piece, and so on.
struct BruteSegmentation {
  bool found = false;
  double score = 0.0;
  std::vector<std::string> pieces;
};
BruteSegmentation brute_force_segment(const std::vector<std::string>& chars,
                                      const std::map<std::string, double>& scores);

/// Central finite difference of ce_loss w.r.t. one scalar parameter.
double fd_gradient(BasicCheckpoint<double> ckpt, const TokenBatch& batch, const std::string& name,
                   std::size_t index, double h, const ForwardMasks* masks = nullptr);

}  // namespace fablelm::testing
