#include "fablelm/packing.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

namespace fablelm {
namespace {

constexpr char kMagic[4] = {'T', 'F', '3', 'P'};

static_assert(std::endian::native == std::endian::little,
              "packed datasets are mapped directly and assume a little-endian host");

class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path) {
    fd_ = ::open(path.c_str(), O_RDONLY);
    if (fd_ < 0) throw IoError("cannot open packed dataset " + path.string());
    struct stat st {};
    if (::fstat(fd_, &st) != 0) {
      ::close(fd_);
      throw IoError("cannot stat " + path.string());
    }
    size_ = static_cast<std::size_t>(st.st_size);
    if (size_ > 0) {
      data_ = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
      if (data_ == MAP_FAILED) {
        ::close(fd_);
        throw IoError("cannot map " + path.string());
      }
    }
  }
  ~MappedFile() {
    if (data_ != nullptr && data_ != MAP_FAILED) ::munmap(data_, size_);
    if (fd_ >= 0) ::close(fd_);
  }
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  const unsigned char* data() const { return static_cast<const unsigned char*>(data_); }
  std::size_t size() const { return size_; }

 private:
  int fd_ = -1;
  void* data_ = nullptr;
  std::size_t size_ = 0;
};

template <typename T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void write_le(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void check_ids(std::span<const TokenId> tokens, std::uint32_t vocab_size) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab_size) {
      throw FormatError("token id " + std::to_string(tokens[i]) + " at position " +
                        std::to_string(i) + " exceeds vocab size " + std::to_string(vocab_size));
    }
  }
}

}  // namespace

PackedDataset::PackedDataset(std::uint32_t block_len, std::uint32_t vocab_size,
                             std::vector<TokenId> tokens)
    : block_len_(block_len), vocab_size_(vocab_size) {
  if (block_len < 2) throw InvalidArgument("block length must be >= 2");
  if (tokens.size() % block_len != 0) {
    throw InvalidArgument("token count is not a multiple of the block length");
  }
  check_ids(tokens, vocab_size);
  auto owned = std::make_shared<const std::vector<TokenId>>(std::move(tokens));
  tokens_ = std::span<const TokenId>(*owned);
  storage_ = std::move(owned);
}

std::span<const TokenId> PackedDataset::block(std::size_t i) const {
  if (i >= block_count()) {
    throw InvalidArgument("block " + std::to_string(i) + " out of range (" +
                          std::to_string(block_count()) + " blocks)");
  }
  return tokens_.subspan(i * block_len_, block_len_);
}

PackedDataset PackedDataset::slice(std::size_t first, std::size_t count) const {
  if (first + count > block_count()) throw InvalidArgument("slice exceeds dataset");
  PackedDataset out = *this;
  out.tokens_ = tokens_.subspan(first * block_len_, count * block_len_);
  return out;
}

void PackedDataset::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 4);
  write_le<std::uint32_t>(out, kVersion);
  write_le<std::uint32_t>(out, block_len_);
  write_le<std::uint32_t>(out, vocab_size_);
  write_le<std::uint64_t>(out, block_count());
  out.write(reinterpret_cast<const char*>(tokens_.data()),
            static_cast<std::streamsize>(tokens_.size_bytes()));
  if (!out) throw IoError("write failed for " + path.string());
}

PackedDataset PackedDataset::load(const std::filesystem::path& path) {
  auto file = std::make_shared<const MappedFile>(path);
  const std::size_t size = file->size();
  if (size < kHeaderBytes) {
    throw FormatError(path.string() + ": truncated header (" + std::to_string(size) + " bytes)");
  }
  const unsigned char* p = file->data();
  if (std::memcmp(p, kMagic, 4) != 0) throw FormatError(path.string() + ": bad magic");
  const auto version = read_le<std::uint32_t>(p + 4);
  if (version != kVersion) {
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version));
  }
  PackedDataset ds;
  ds.block_len_ = read_le<std::uint32_t>(p + 8);
  ds.vocab_size_ = read_le<std::uint32_t>(p + 12);
  const auto blocks = read_le<std::uint64_t>(p + 16);
  if (ds.block_len_ < 2) throw FormatError(path.string() + ": block length < 2");
  const std::uint64_t block_bytes = std::uint64_t{ds.block_len_} * sizeof(TokenId);
  const bool fits = blocks <= (size - kHeaderBytes) / block_bytes;
  const std::uint64_t expected = fits ? kHeaderBytes + blocks * block_bytes : 0;
  if (!fits || size != expected) {
    throw FormatError(path.string() + ": truncated or oversized file (" + std::to_string(size) +
                      " bytes, header implies " + std::to_string(expected) + ")");
  }
  // The header is 24 bytes, so the payload is 4-byte aligned within the page.
  ds.tokens_ = std::span<const TokenId>(reinterpret_cast<const TokenId*>(p + kHeaderBytes),
                                        blocks * ds.block_len_);
  check_ids(ds.tokens_, ds.vocab_size_);
  ds.storage_ = std::move(file);
  return ds;
}

bool operator==(const PackedDataset& a, const PackedDataset& b) {
  return a.block_len_ == b.block_len_ && a.vocab_size_ == b.vocab_size_ &&
         std::equal(a.tokens_.begin(), a.tokens_.end(), b.tokens_.begin(), b.tokens_.end());
}

PackedDataset pack_stream(std::span<const TokenId> stream, std::uint32_t block_len,
                          std::uint32_t vocab_size) {
  if (block_len < 2) throw InvalidArgument("block length must be >= 2");
  if (stream.size() < block_len) {
    throw InvalidArgument("stream has " + std::to_string(stream.size()) +
                          " tokens, fewer than one block of " + std::to_string(block_len));
  }
  const std::size_t kept = stream.size() / block_len * block_len;
  return PackedDataset(block_len, vocab_size,
                       std::vector<TokenId>(stream.begin(), stream.begin() + kept));
}

std::vector<TokenId> token_stream(const TokenizerModel& model,
                                  const std::vector<Document>& corpus) {
  std::vector<TokenId> stream;
  for (const auto& doc : corpus) {
    stream.push_back(model.special().bos);
    const auto ids = model.encode(doc.text);
    stream.insert(stream.end(), ids.begin(), ids.end());
  }
  return stream;
}

PackedDataset pack(const TokenizerModel& model, const std::vector<Document>& corpus,
                   std::uint32_t block_len) {
  const auto stream = token_stream(model, corpus);
  return pack_stream(stream, block_len, static_cast<std::uint32_t>(model.vocab_size()));
}

}  // namespace fablelm
