#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fablelm/model.hpp"
#include "fablelm/packing.hpp"
#include "fablelm/tokenizer.hpp"

namespace fablelm {

// ---- Intrinsic ------------------------------------------------------------

struct IntrinsicResult {
  double ce = 0.0;   // nats per token
  double ppl = 0.0;  // exp(ce)
  std::size_t positions = 0;
};

/// Mean next-token cross-entropy over every position of every block.
/// `max_blocks` = 0 evaluates all of them.
IntrinsicResult intrinsic(const Checkpoint& ckpt, const PackedDataset& blocks,
                          const ForwardMasks* masks = nullptr, std::size_t batch = 8,
                          std::size_t max_blocks = 0);

// ---- Agreement probes -----------------------------------------------------

struct MinimalPair {
  std::string prefix;
  std::string grammatical;
  std::string ungrammatical;
  std::string phenomenon;
};

/// JSONL {prefix, grammatical, ungrammatical, phenomenon}.
std::vector<MinimalPair> load_probes(const std::filesystem::path& path);

/// Summed log-probability (nats) of the continuation's tokens after
/// [bos] + encode(prefix). Throws InvalidArgument if the continuation
/// encodes to nothing.
double continuation_logprob(const Checkpoint& ckpt, const TokenizerModel& tok,
                            const std::string& prefix, const std::string& continuation);

/// Strictly greater wins; ties count as wrong.
inline bool pair_correct(double grammatical_lp, double ungrammatical_lp) {
  return grammatical_lp > ungrammatical_lp;
}

struct AgreementResult {
  double accuracy = 0.0;
  std::vector<bool> correct;
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_phenomenon;  // correct, total
};

AgreementResult agreement(const Checkpoint& ckpt, const TokenizerModel& tok,
                          const std::vector<MinimalPair>& pairs);

// ---- Entity coherence -----------------------------------------------------

struct Gazetteer {
  std::map<std::string, std::string> entries;                    // lowercased surface -> lemma
  std::vector<std::pair<std::string, std::string>> suffix_rules;  // (suffix, replacement)

  /// Entries JSONL {surface, lemma}; optional rules JSONL {suffix, replacement}.
  static Gazetteer load(const std::filesystem::path& entries,
                        const std::optional<std::filesystem::path>& rules = std::nullopt);
  void add(const std::string& surface, const std::string& lemma);
  void add_rule(const std::string& suffix, const std::string& replacement);

  /// Lemma for one word: a direct entry, else the first suffix rule (longest
  /// suffix first) whose rewrite is a known lemma.
  std::optional<std::string> lemmatize(const std::string& word) const;
  std::size_t max_entry_words() const { return max_words_; }
  const std::set<std::string>& lemmas() const { return lemmas_; }

 private:
  std::set<std::string> lemmas_;
  std::size_t max_words_ = 1;
};

/// Lemmas of the entity mentions in `text`, in order. Matching is
/// case-insensitive and prefers the longest multi-word entry.
std::vector<std::string> entity_mentions(const std::string& text, const Gazetteer& gaz);

/// Shannon entropy (bits) of the label distribution divided by log2(K) for
/// K distinct labels; 0 when K <= 1.
double normalized_entropy(const std::vector<std::string>& labels);

double entity_coherence(const std::string& text, const Gazetteer& gaz);

// ---- Grammar --------------------------------------------------------------

class GrammarChecker {
 public:
  virtual ~GrammarChecker() = default;
  virtual std::size_t count_errors(const std::string& text) const = 0;
};

/// Doubled words, sentence-initial lowercase letters, unbalanced quotes.
class BuiltinGrammarChecker : public GrammarChecker {
 public:
  std::size_t count_errors(const std::string& text) const override;

  static std::size_t doubled_words(const std::string& text);
  static std::size_t lowercase_sentence_starts(const std::string& text);
  static std::size_t unbalanced_quotes(const std::string& text);
};

/// Whitespace-delimited tokens.
std::vector<std::string> split_words(const std::string& text);

/// 1 - M / W clamped to [0, 1]; 0 for an empty text.
double grammar_score(std::size_t error_count, const std::string& text);
double grammar_score(const GrammarChecker& checker, const std::string& text);

// ---- Diversity and readability -------------------------------------------

/// Distinct word n-grams over total word n-grams, n-grams taken within each
/// text. 0 when there are none.
double distinct_n(const std::vector<std::string>& texts, std::size_t n);

/// Sentence BLEU of `hypothesis` against `references`: clipped n-gram
/// precisions for n = 1..max_n (a zero-match order uses (0+1)/(t+1)),
/// geometric mean, brevity penalty against the closest reference length.
double sentence_bleu(const std::vector<std::string>& hypothesis,
                     const std::vector<std::vector<std::string>>& references, std::size_t max_n);

/// Mean sentence BLEU of each text against all the others.
double self_bleu(const std::vector<std::string>& texts, std::size_t max_n = 4);

/// Vowel groups over a ă â e i î o u; ea ia ie io iu oa ua uă count once.
std::size_t count_syllables(const std::string& word);
std::size_t count_sentences(const std::string& text);

/// Flesch reading ease; 0 for an empty text.
double readability(const std::string& text);

// ---- Throughput -----------------------------------------------------------

struct ThroughputResult {
  double tokens_per_sec = 0.0;  // median over repeats
  std::vector<double> samples;
  std::size_t tokens_per_run = 0;
};

/// Greedy generation of `batch` sequences of gen_len tokens after a fixed
/// seeded prompt; one untimed warmup run, then the median of `repeats`.
ThroughputResult throughput(const Checkpoint& ckpt, std::size_t prompt_len, std::size_t gen_len,
                            std::size_t batch, std::size_t repeats, std::uint64_t seed = 0);

double median(std::vector<double> values);

// ---- Report ---------------------------------------------------------------

struct EvalReport {
  std::optional<double> ce, ppl;
  std::optional<double> agreement_acc;
  std::optional<double> coherence;
  std::optional<double> grammar_score;
  std::map<std::size_t, double> distinct_n;
  std::optional<double> self_bleu;
  std::optional<double> readability;
  std::optional<double> tokens_per_sec;

  /// Absent metrics are omitted.
  std::string to_json() const;
};

}  // namespace fablelm
