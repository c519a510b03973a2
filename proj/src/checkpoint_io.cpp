#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "fablelm/model.hpp"

namespace fablelm {

namespace binio {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> data(size);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed for " + path.string());
  return data;
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

void put_config(Writer& w, const ModelConfig& c) {
  w.put<std::uint32_t>(c.vocab_size);
  w.put<std::uint32_t>(c.n_layers);
  w.put<std::uint32_t>(c.hidden);
  w.put<std::uint32_t>(c.n_heads);
  w.put<std::uint32_t>(c.head_dim);
  w.put<std::uint32_t>(c.mlp_dim);
  w.put<std::uint32_t>(c.max_seq);
  w.put<std::uint8_t>(c.tie_embeddings ? 1 : 0);
  w.put<float>(static_cast<float>(c.rope_theta));
}

ModelConfig get_config(Reader& r) {
  ModelConfig c;
  c.vocab_size = r.get<std::uint32_t>();
  c.n_layers = r.get<std::uint32_t>();
  c.hidden = r.get<std::uint32_t>();
  c.n_heads = r.get<std::uint32_t>();
  c.head_dim = r.get<std::uint32_t>();
  c.mlp_dim = r.get<std::uint32_t>();
  c.max_seq = r.get<std::uint32_t>();
  const auto tie = r.get<std::uint8_t>();
  if (tie > 1) r.fail("bad tie flag");
  c.tie_embeddings = tie == 1;
  c.rope_theta = r.get<float>();
  try {
    c.validate();
  } catch (const InvalidArgument& e) {
    r.fail(std::string("invalid model config: ") + e.what());
  }
  return c;
}

void put_tensor_header(Writer& w, const std::string& name, const std::vector<std::size_t>& shape) {
  w.str16(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (const auto d : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
}

std::size_t get_tensor_header(Reader& r, std::string& name, std::vector<std::size_t>& shape) {
  name = r.str16();
  const auto rank = r.get<std::uint8_t>();
  if (rank == 0 || rank > 2) r.fail("tensor " + name + " has unsupported rank");
  shape.assign(rank, 0);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = r.get<std::uint32_t>();
    n *= d;
  }
  return n;
}

}  // namespace binio

namespace {

constexpr char kMagic[4] = {'T', 'F', '3', 'C'};
constexpr std::uint32_t kVersion = 1;

std::vector<unsigned char> serialize(const Checkpoint& ckpt) {
  validate_checkpoint(ckpt);
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  binio::put_config(w, ckpt.config);
  const auto specs = parameter_specs(ckpt.config);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(specs.size()));
  for (const auto& spec : specs) {
    const auto& t = ckpt.at(spec.name);
    binio::put_tensor_header(w, spec.name, t.shape);
    w.bytes(t.data.data(), t.data.size() * sizeof(float));
  }
  return w.buffer();
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file_atomic(path, serialize(ckpt));
}

std::uint64_t checkpoint_file_size(const Checkpoint& ckpt) {
  validate_checkpoint(ckpt);
  // magic, version, config block, tensor count
  std::uint64_t n = 4 + 4 + 7 * 4 + 1 + 4 + 4;
  for (const auto& spec : parameter_specs(ckpt.config)) {
    n += 2 + spec.name.size() + 1 + 4 * spec.shape.size();
    n += ckpt.at(spec.name).numel() * sizeof(float);
  }
  return n;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(binio::read_file(path), path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.config = binio::get_config(r);
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    std::vector<std::size_t> shape;
    const std::size_t n = binio::get_tensor_header(r, name, shape);
    if (n > r.remaining() / sizeof(float)) r.fail("truncated tensor " + name);
    Tensor<float> t;
    t.shape = shape;
    t.data.resize(n);
    r.bytes(t.data.data(), n * sizeof(float));
    if (!ckpt.tensors.emplace(name, std::move(t)).second) r.fail("duplicate tensor " + name);
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last tensor");
  try {
    validate_checkpoint(ckpt);
  } catch (const InvalidArgument& e) {
    r.fail(e.what());
  }
  return ckpt;
}

}  // namespace fablelm
