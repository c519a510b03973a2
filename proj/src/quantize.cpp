#include <algorithm>
#include <cmath>
#include <cfenv>

#include "binary_io.hpp"
#include "fablelm/compress.hpp"

namespace fablelm {

namespace {

bool exempt(const std::string& name) {
  return name.size() >= 4 && name.compare(name.size() - 4, 4, "norm") == 0;
}

std::size_t packed6_bytes(std::size_t count) { return (count + 3) / 4 * 3; }

std::size_t payload_bytes(const QuantizedTensor& t) {
  const std::size_t n = t.bits == 0 ? t.raw.size() : t.q.size();
  switch (t.bits) {
    case 0: return n * sizeof(float);
    case 8: return n;
    case 6: return packed6_bytes(n);
    default: throw InvalidArgument("unsupported bit width " + std::to_string(t.bits));
  }
}

}  // namespace

int qmax_for_bits(int bits) {
  switch (bits) {
    case 8: return 127;
    case 6: return 31;
    default: throw InvalidArgument("bits must be 8 or 6, got " + std::to_string(bits));
  }
}

QuantizedTensor quantize_tensor(const Tensor<float>& t, int bits) {
  const int qmax = qmax_for_bits(bits);
  QuantizedTensor out;
  out.shape = t.shape;
  out.bits = bits;
  float amax = 0.0f;
  for (const float w : t.data) {
    if (!std::isfinite(w)) throw NumericError("cannot quantize a non-finite weight");
    amax = std::max(amax, std::fabs(w));
  }
  out.scale = amax / static_cast<float>(qmax);
  out.q.resize(t.data.size(), 0);
  if (out.scale == 0.0f) return out;
  // nearbyint follows the current rounding mode; make sure it is to-nearest-even.
  const int saved = std::fegetround();
  std::fesetround(FE_TONEAREST);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const double r = std::nearbyint(static_cast<double>(t.data[i]) / out.scale);
    out.q[i] = static_cast<std::int8_t>(std::clamp(r, -static_cast<double>(qmax), static_cast<double>(qmax)));
  }
  std::fesetround(saved);
  return out;
}

Tensor<float> dequantize_tensor(const QuantizedTensor& q) {
  Tensor<float> t;
  t.shape = q.shape;
  if (q.bits == 0) {
    t.data = q.raw;
    return t;
  }
  qmax_for_bits(q.bits);
  t.data.resize(q.q.size());
  for (std::size_t i = 0; i < q.q.size(); ++i) t.data[i] = static_cast<float>(q.q[i]) * q.scale;
  return t;
}

QuantizedCheckpoint quantize(const Checkpoint& ckpt, int bits) {
  qmax_for_bits(bits);
  validate_checkpoint(ckpt);
  QuantizedCheckpoint out;
  out.config = ckpt.config;
  out.bits = bits;
  for (const auto& [name, t] : ckpt.tensors) {
    if (exempt(name)) {
      QuantizedTensor raw;
      raw.shape = t.shape;
      raw.raw = t.data;
      out.tensors.emplace(name, std::move(raw));
    } else {
      out.tensors.emplace(name, quantize_tensor(t, bits));
    }
  }
  return out;
}

Checkpoint dequantize(const QuantizedCheckpoint& q) {
  Checkpoint ckpt;
  ckpt.config = q.config;
  for (const auto& [name, t] : q.tensors) ckpt.tensors.emplace(name, dequantize_tensor(t));
  validate_checkpoint(ckpt);
  return ckpt;
}

std::vector<std::uint8_t> pack6(std::span<const std::int8_t> values) {
  std::vector<std::uint8_t> out;
  out.reserve(packed6_bytes(values.size()));
  for (std::size_t i = 0; i < values.size(); i += 4) {
    std::uint32_t word = 0;
    for (std::size_t k = 0; k < 4 && i + k < values.size(); ++k) {
      const int v = values[i + k];
      if (v < -32 || v > 31) throw InvalidArgument("value " + std::to_string(v) + " does not fit in 6 bits");
      word |= (static_cast<std::uint32_t>(v) & 0x3Fu) << (6 * k);
    }
    out.push_back(static_cast<std::uint8_t>(word));
    out.push_back(static_cast<std::uint8_t>(word >> 8));
    out.push_back(static_cast<std::uint8_t>(word >> 16));
  }
  return out;
}

std::vector<std::int8_t> unpack6(std::span<const std::uint8_t> bytes, std::size_t count) {
  if (bytes.size() != packed6_bytes(count)) {
    throw FormatError("6-bit payload of " + std::to_string(bytes.size()) + " bytes cannot hold " +
                      std::to_string(count) + " values");
  }
  std::vector<std::int8_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t g = i / 4 * 3;
    const std::uint32_t word = bytes[g] | (std::uint32_t{bytes[g + 1]} << 8) |
                               (std::uint32_t{bytes[g + 2]} << 16);
    const int v = static_cast<int>((word >> (6 * (i % 4))) & 0x3Fu);
    out[i] = static_cast<std::int8_t>(v >= 32 ? v - 64 : v);
  }
  return out;
}

// Layout: "TF3Q", u32 version, u8 bits, model config, u32 tensor count, then
// per tensor: name, rank, dims, u8 bits (0 = raw f32), f32 scale, payload.

namespace {

constexpr char kMagic[4] = {'T', 'F', '3', 'Q'};
constexpr std::uint32_t kVersion = 1;

std::vector<unsigned char> serialize(const QuantizedCheckpoint& q) {
  qmax_for_bits(q.bits);
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(q.bits));
  binio::put_config(w, q.config);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(q.tensors.size()));
  for (const auto& [name, t] : q.tensors) {
    binio::put_tensor_header(w, name, t.shape);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.bits));
    w.put<float>(t.scale);
    switch (t.bits) {
      case 0: w.bytes(t.raw.data(), t.raw.size() * sizeof(float)); break;
      case 8: w.bytes(t.q.data(), t.q.size()); break;
      case 6: {
        const auto packed = pack6(t.q);
        w.bytes(packed.data(), packed.size());
        break;
      }
      default: throw InvalidArgument("tensor " + name + " has unsupported bit width");
    }
  }
  return w.buffer();
}

}  // namespace

void save_quantized(const QuantizedCheckpoint& q, const std::filesystem::path& path) {
  binio::write_file_atomic(path, serialize(q));
}

std::uint64_t quantized_file_size(const QuantizedCheckpoint& q) {
  std::uint64_t n = 4 + 4 + 1 + 7 * 4 + 1 + 4 + 4;
  for (const auto& [name, t] : q.tensors) {
    n += 2 + name.size() + 1 + 4 * t.shape.size() + 1 + 4 + payload_bytes(t);
  }
  return n;
}

QuantizedCheckpoint load_quantized(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("not a quantized checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported quantized version " + std::to_string(version));
  QuantizedCheckpoint q;
  q.bits = r.get<std::uint8_t>();
  if (q.bits != 8 && q.bits != 6) r.fail("unsupported bit width " + std::to_string(q.bits));
  q.config = binio::get_config(r);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    QuantizedTensor t;
    const std::size_t n = binio::get_tensor_header(r, name, t.shape);
    t.bits = r.get<std::uint8_t>();
    t.scale = r.get<float>();
    if (t.bits != 0 && t.bits != q.bits) r.fail("tensor " + name + " has mixed bit width");
    if (!std::isfinite(t.scale) || t.scale < 0.0f) r.fail("tensor " + name + " has a bad scale");
    if (t.bits == 0) {
      if (n > r.remaining() / sizeof(float)) r.fail("truncated tensor " + name);
      t.raw.resize(n);
      r.bytes(t.raw.data(), n * sizeof(float));
    } else if (t.bits == 8) {
      if (n > r.remaining()) r.fail("truncated tensor " + name);
      t.q.resize(n);
      r.bytes(t.q.data(), n);
      for (const auto v : t.q) {
        if (v < -127) r.fail("tensor " + name + " holds -128");
      }
    } else {
      const std::size_t nb = packed6_bytes(n);
      if (nb > r.remaining()) r.fail("truncated tensor " + name);
      std::vector<std::uint8_t> packed(nb);
      r.bytes(packed.data(), nb);
      t.q = unpack6(packed, n);
      for (const auto v : t.q) {
        if (v < -31) r.fail("tensor " + name + " holds a value outside +-31");
      }
    }
    if (!q.tensors.emplace(name, std::move(t)).second) r.fail("duplicate tensor " + name);
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last tensor");
  try {
    dequantize(q);
  } catch (const InvalidArgument& e) {
    r.fail(e.what());
  }
  return q;
}

}  // namespace fablelm
