#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fablelm/corpus.hpp"
#include "fablelm/error.hpp"

namespace fablelm {

enum class TokenizerKind { kBpe, kUnigram };

std::string_view to_string(TokenizerKind kind);
TokenizerKind parse_tokenizer_kind(std::string_view name);

/// Control tokens always occupy ids 0-3.
struct SpecialIds {
  TokenId pad = 0;
  TokenId unk = 1;
  TokenId bos = 2;
  TokenId eos = 3;
};

inline constexpr std::size_t kNumSpecial = 4;
inline constexpr std::string_view kSpecialPieces[kNumSpecial] = {"<pad>", "<unk>", "<bos>",
                                                                  "<eos>"};

/// U+2581, prefixed to every word before segmentation.
inline constexpr std::string_view kWordBoundary = "\xE2\x96\x81";

struct Piece {
  std::string text;
  double score = 0.0;

  friend bool operator==(const Piece&, const Piece&) = default;
};

using MergeRule = std::pair<std::string, std::string>;

/// Splits on whitespace and prefixes each word with kWordBoundary.
std::vector<std::string> pre_tokenize(std::string_view text);

/// A trained subword vocabulary. Immutable once built; encode/decode are
/// safe to call concurrently.
class TokenizerModel {
 public:
  /// `pieces` excludes the specials, which are prepended. BPE merges must be
  /// in training order and every merge result must be a piece.
  static TokenizerModel bpe(std::vector<Piece> pieces, std::vector<MergeRule> merges);
  /// `pieces` excludes the specials; scores are log-probabilities.
  static TokenizerModel unigram(std::vector<Piece> pieces);

  TokenizerKind kind() const { return kind_; }
  const std::vector<Piece>& pieces() const { return pieces_; }
  const std::vector<MergeRule>& merges() const { return merges_; }
  SpecialIds special() const { return {}; }
  std::size_t vocab_size() const { return pieces_.size(); }
  std::optional<TokenId> piece_id(std::string_view piece) const;

  std::vector<TokenId> encode(std::string_view text, bool add_bos_eos = false) const;
  /// Drops special tokens and turns boundary markers back into spaces.
  /// Throws InvalidArgument on an out-of-range id.
  std::string decode(std::span<const TokenId> ids) const;

  /// Segments one pre-tokenized word (boundary marker included).
  std::vector<TokenId> encode_word(std::string_view word) const;

  /// Best unigram path for one word: summed log-probability and ids.
  /// Ties prefer fewer tokens, then the longest leading piece.
  struct Path {
    std::vector<TokenId> ids;
    double score = 0.0;
  };
  Path viterbi(std::string_view word) const;

  std::string to_json() const;
  static TokenizerModel from_json(std::string_view json);
  void save(const std::filesystem::path& path) const;
  static TokenizerModel load(const std::filesystem::path& path);

  static constexpr int kFormatVersion = 1;

 private:
  TokenizerModel() = default;
  void build_indexes();
  std::vector<TokenId> bpe_word(std::string_view word) const;

  TokenizerKind kind_ = TokenizerKind::kUnigram;
  std::vector<Piece> pieces_;
  std::vector<MergeRule> merges_;

  std::unordered_map<std::string, TokenId> index_;  // non-special pieces
  std::size_t max_piece_chars_ = 1;
  double unk_score_ = 0.0;
  // BPE: (left id, right id) -> ascending (rank, merged id) list.
  std::unordered_map<std::uint64_t, std::vector<std::pair<std::size_t, TokenId>>> merge_rank_;
};

struct SegmentationStats {
  double avg_tokens = 0.0;
  double median_tokens = 0.0;
  std::size_t min_tokens = 0;
  std::size_t max_tokens = 0;
};

/// Summarizes a list of per-document token counts.
SegmentationStats summarize_counts(std::vector<std::size_t> counts);

/// Token counts per document (no bos/eos), summarized.
SegmentationStats segmentation_stats(const TokenizerModel& model, const std::vector<Document>& corpus);

/// Greedy BPE: start from characters, merge the most frequent adjacent pair
/// (ties: lexicographically smallest (left, right)) until the vocabulary
/// reaches `target_vocab` or no pair occurs at least twice.
TokenizerModel train_bpe(const std::vector<Document>& corpus, std::size_t target_vocab);

struct UnigramOptions {
  std::size_t target_vocab = 32000;
  double seed_multiplier = 4.0;    // seed size = seed_multiplier * target_vocab
  std::size_t em_iters = 2;        // EM iterations before each pruning round
  double prune_fraction = 0.25;    // share of prunable pieces dropped per round
  std::size_t max_piece_chars = 16;

  void validate() const;
};

TokenizerModel train_unigram(const std::vector<Document>& corpus, const UnigramOptions& options);

}  // namespace fablelm
