#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "fablelm/corpus.hpp"
#include "fablelm/error.hpp"
#include "fablelm/tokenizer.hpp"

namespace fablelm {

/// Fixed-length training blocks cut from one concatenated token stream.
/// Labels are the inputs themselves (the loss shifts by one inside a block),
/// so only one copy is stored.
///
/// Copies share storage; a loaded dataset reads straight out of the mapped
/// file. Immutable, safe for concurrent readers.
class PackedDataset {
 public:
  PackedDataset() = default;
  /// `tokens.size()` must be a multiple of `block_len`; ids must be < vocab_size.
  PackedDataset(std::uint32_t block_len, std::uint32_t vocab_size, std::vector<TokenId> tokens);

  std::uint32_t block_len() const { return block_len_; }
  std::uint32_t vocab_size() const { return vocab_size_; }
  std::size_t block_count() const { return block_len_ == 0 ? 0 : tokens_.size() / block_len_; }
  std::size_t token_count() const { return tokens_.size(); }

  std::span<const TokenId> block(std::size_t i) const;
  std::span<const TokenId> input_ids(std::size_t i) const { return block(i); }
  std::span<const TokenId> labels(std::size_t i) const { return block(i); }
  std::span<const TokenId> tokens() const { return tokens_; }

  /// Blocks [first, first + count) as a dataset sharing this one's storage.
  PackedDataset slice(std::size_t first, std::size_t count) const;

  void save(const std::filesystem::path& path) const;
  /// Maps the file read-only. Validates magic, version, size and ids.
  static PackedDataset load(const std::filesystem::path& path);

  friend bool operator==(const PackedDataset& a, const PackedDataset& b);

  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 24;

 private:
  std::uint32_t block_len_ = 0;
  std::uint32_t vocab_size_ = 0;
  std::shared_ptr<const void> storage_;
  std::span<const TokenId> tokens_;
};

/// Cuts floor(|stream| / block_len) blocks; the remainder is dropped.
PackedDataset pack_stream(std::span<const TokenId> stream, std::uint32_t block_len,
                          std::uint32_t vocab_size);

/// Encodes every document with a leading bos (no eos), concatenates, and
/// packs. Throws InvalidArgument if the stream is shorter than one block.
PackedDataset pack(const TokenizerModel& model, const std::vector<Document>& corpus,
                   std::uint32_t block_len);

/// The concatenated stream pack() cuts blocks from.
std::vector<TokenId> token_stream(const TokenizerModel& model, const std::vector<Document>& corpus);

}  // namespace fablelm
