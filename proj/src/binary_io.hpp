#pragma once

// Little-endian record I/O for the binary checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "fablelm/error.hpp"
#include "fablelm/model.hpp"

namespace fablelm::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written in host order and assume little-endian");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str16(const std::string& s) {
    if (s.size() > UINT16_MAX) throw InvalidArgument("name too long: " + s);
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(std::vector<unsigned char> data, std::string context)
      : data_(std::move(data)), context_(std::move(context)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string str16() {
    const auto n = get<std::uint16_t>();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(context_ + ": " + what + " (at byte " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n) const {
    if (n > remaining()) fail("truncated file");
  }

  std::vector<unsigned char> data_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& data);

/// The model config block shared by the checkpoint formats.
void put_config(Writer& w, const ModelConfig& c);
ModelConfig get_config(Reader& r);

/// Tensor header: name, rank, dims. Returns the element count.
void put_tensor_header(Writer& w, const std::string& name, const std::vector<std::size_t>& shape);
std::size_t get_tensor_header(Reader& r, std::string& name, std::vector<std::size_t>& shape);

}  // namespace fablelm::binio
