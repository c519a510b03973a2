#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fablelm/model.hpp"
#include "fablelm/packing.hpp"
#include "fablelm/tokenizer.hpp"

namespace fablelm::testing {

/// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// 2 layers, hidden 8, 2 heads of 4, MLP 12.
ModelConfig tiny_config(std::uint32_t vocab = 11, bool tied = true, std::uint32_t max_seq = 16);

/// Seeded init with every weight drawn at `std`, norm gains near 1. Larger
/// weights than the training init keep finite-difference checks meaningful.
Checkpoint random_checkpoint(const ModelConfig& config, std::uint64_t seed, double std = 0.3);

TokenBatch random_batch(std::uint32_t vocab, std::size_t batch, std::size_t seq, std::uint64_t seed);

/// Synthetic fables, a BPE tokenizer trained on them, and the packed blocks.
struct DeskData {
  std::vector<std::string> texts;
  TokenizerModel tokenizer;
  PackedDataset data;
};

/// Generates stories until the packed stream holds at least `min_tokens`.
DeskData desk_data(std::size_t min_tokens, std::size_t vocab, std::uint32_t block_len,
                   std::uint64_t seed);

}  // namespace fablelm::testing
