#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nabla/model.hpp"
#include "nabla/parameters.hpp"

namespace nabla {

// Layout (all integers little-endian):
//   "NBLN" | u32 version | u32 spec_len | spec JSON | u64 epoch | u32 count |
//   count x { u32 name_len | name | u8 kind | 4 x u32 shape | u64 offset } |
//   u64 payload_floats | payload (IEEE-754 binary32)
// Offsets are in floats from the start of the payload.
inline constexpr char kCheckpointMagic[4] = {'N', 'B', 'L', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Version, Spec, Manifest, Truncated, Mismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline const char* to_string(CheckpointError::Kind k) {
  switch (k) {
    case CheckpointError::Kind::Io: return "io";
    case CheckpointError::Kind::BadMagic: return "bad_magic";
    case CheckpointError::Kind::Version: return "version_mismatch";
    case CheckpointError::Kind::Spec: return "corrupt_spec";
    case CheckpointError::Kind::Manifest: return "corrupt_manifest";
    case CheckpointError::Kind::Truncated: return "truncated_payload";
    case CheckpointError::Kind::Mismatch: return "spec_mismatch";
  }
  return "unknown";
}

struct CheckpointTensor {
  std::string name;
  TensorKind kind = TensorKind::Param;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string spec_text;
  ModelSpec spec;
  std::uint64_t epoch = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, std::uint64_t epoch = 0) {
  Checkpoint c;
  c.spec = model.spec();
  c.spec_text = nlohmann::json(model.spec()).dump();
  c.epoch = epoch;
  for (const auto& e : model.store().entries()) {
    c.tensors.push_back({e.name, e.kind, e.tensor.shape(), std::vector<float>(e.tensor.vec().begin(), e.tensor.vec().end())});
  }
  return c;
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& bytes) : bytes_(bytes) {}

  bool has(std::size_t n) const { return pos_ + n <= bytes_.size() && pos_ + n >= pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint8_t u8(CheckpointError::Kind on_short, const char* what) {
    need(1, on_short, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint32_t u32(CheckpointError::Kind on_short, const char* what) {
    need(4, on_short, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(CheckpointError::Kind on_short, const char* what) {
    need(8, on_short, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32(CheckpointError::Kind::Truncated, "payload")); }
  std::string str(std::size_t n, CheckpointError::Kind on_short, const char* what) {
    need(n, on_short, what);
    std::string s(bytes_.begin() + std::ptrdiff_t(pos_), bytes_.begin() + std::ptrdiff_t(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, CheckpointError::Kind kind, const char* what) {
    if (!has(n)) throw CheckpointError(kind, std::string("checkpoint ends inside ") + what);
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(std::string(kCheckpointMagic, 4));
  w.u32(c.version);
  w.u32(static_cast<std::uint32_t>(c.spec_text.size()));
  w.raw(c.spec_text);
  w.u64(c.epoch);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (t.data.size() != t.shape.numel()) throw ShapeError("checkpoint tensor " + t.name + " data/shape mismatch");
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name);
    w.u8(t.kind == TensorKind::Param ? 0 : 1);
    for (std::size_t d : {t.shape.n, t.shape.c, t.shape.h, t.shape.w}) w.u32(static_cast<std::uint32_t>(d));
    w.u64(offset);
    offset += t.data.size();
  }
  w.u64(offset);
  for (const auto& t : c.tensors)
    for (float v : t.data) w.f32(v);
  return w.bytes();
}

inline Checkpoint parse_checkpoint(const std::vector<char>& bytes) {
  using K = CheckpointError::Kind;
  detail::ByteReader r(bytes);
  if (r.str(4, K::BadMagic, "magic") != std::string(kCheckpointMagic, 4)) {
    throw CheckpointError(K::BadMagic, "not a checkpoint (bad magic)");
  }
  Checkpoint c;
  c.version = r.u32(K::BadMagic, "version");
  if (c.version != kCheckpointVersion) {
    throw CheckpointError(K::Version, "checkpoint version " + std::to_string(c.version) + " unsupported (expected " +
                                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t spec_len = r.u32(K::Spec, "spec length");
  c.spec_text = r.str(spec_len, K::Spec, "spec text");
  try {
    c.spec = nlohmann::json::parse(c.spec_text).get<ModelSpec>();
  } catch (const std::exception& e) {
    throw CheckpointError(K::Spec, std::string("checkpoint spec unreadable: ") + e.what());
  }
  c.epoch = r.u64(K::Manifest, "epoch");
  const std::uint32_t count = r.u32(K::Manifest, "manifest count");
  struct Row {
    std::uint64_t offset, numel;
  };
  std::vector<Row> rows;
  std::map<std::string, int> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const std::uint32_t name_len = r.u32(K::Manifest, "manifest");
    if (name_len == 0 || name_len > 4096) throw CheckpointError(K::Manifest, "corrupt manifest: bad name length");
    t.name = r.str(name_len, K::Manifest, "manifest");
    if (!names.emplace(t.name, 0).second) throw CheckpointError(K::Manifest, "corrupt manifest: duplicate " + t.name);
    const std::uint8_t kind = r.u8(K::Manifest, "manifest");
    if (kind > 1) throw CheckpointError(K::Manifest, "corrupt manifest: unknown tensor kind for " + t.name);
    t.kind = kind == 0 ? TensorKind::Param : TensorKind::Buffer;
    std::uint64_t dims[4];
    for (auto& d : dims) d = r.u32(K::Manifest, "manifest");
    t.shape = {dims[0], dims[1], dims[2], dims[3]};
    const std::uint64_t numel = dims[0] * dims[1] * dims[2] * dims[3];
    if (numel == 0 || numel > (std::uint64_t{1} << 34)) {
      throw CheckpointError(K::Manifest, "corrupt manifest: bad shape for " + t.name);
    }
    rows.push_back({r.u64(K::Manifest, "manifest"), numel});
    c.tensors.push_back(std::move(t));
  }
  const std::uint64_t payload = r.u64(K::Manifest, "payload length");
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].offset != expected) {
      throw CheckpointError(K::Manifest, "corrupt manifest: tensor " + c.tensors[i].name + " offset " +
                                             std::to_string(rows[i].offset) + " overlaps or leaves a gap");
    }
    expected += rows[i].numel;
  }
  if (expected != payload) throw CheckpointError(K::Manifest, "corrupt manifest: payload length disagrees with shapes");
  if (r.remaining() < payload * 4) {
    throw CheckpointError(K::Truncated, "truncated payload: " + std::to_string(r.remaining()) + " of " +
                                            std::to_string(payload * 4) + " bytes present");
  }
  if (r.remaining() > payload * 4) throw CheckpointError(K::Truncated, "trailing bytes after payload");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    c.tensors[i].data.resize(rows[i].numel);
    for (auto& v : c.tensors[i].data) v = r.f32();
  }
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = serialize_checkpoint(c);
  // Write-then-rename so a crash never leaves a half-written checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path, std::uint64_t epoch = 0) {
  write_checkpoint(path, make_checkpoint(model, epoch));
}

/// Builds the model the checkpoint describes and fills every tensor; the
/// checkpoint must cover the model's tensors exactly.
template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
  Model<T> model = build_model<T>(c.spec);
  auto entries = model.store().entries();
  if (entries.size() != c.tensors.size()) {
    throw CheckpointError(CheckpointError::Kind::Mismatch,
                          "checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, its spec builds " +
                              std::to_string(entries.size()));
  }
  for (auto& e : entries) {
    const CheckpointTensor* t = c.find(e.name);
    if (!t || t->shape != e.tensor.shape() || t->kind != e.kind) {
      throw CheckpointError(CheckpointError::Kind::Mismatch, "checkpoint tensor " + e.name + " missing or reshaped");
    }
    std::copy(t->data.begin(), t->data.end(), e.tensor.vec().begin());
  }
  return model;
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint<T>(read_checkpoint(path));
}

struct TransferReport {
  std::vector<std::string> loaded;
  /// Target tensors left at their initial values, with the reason.
  std::vector<std::pair<std::string, std::string>> skipped;
  /// Checkpoint tensors with no same-named target.
  std::vector<std::string> unused;
  std::string warning;
};

/// Copies every checkpoint tensor whose name and shape match a tensor of
/// `model`; everything else keeps its initialization.
template <typename T>
TransferReport transfer_load(Model<T>& model, const Checkpoint& c) {
  TransferReport rep;
  std::map<std::string, bool> used;
  for (const auto& t : c.tensors) used[t.name] = false;
  for (auto& e : model.store().entries()) {
    const CheckpointTensor* t = c.find(e.name);
    if (!t) {
      rep.skipped.emplace_back(e.name, "absent from checkpoint");
      continue;
    }
    used[e.name] = true;
    if (t->shape != e.tensor.shape()) {
      rep.skipped.emplace_back(e.name, "shape " + t->shape.str() + " vs " + e.tensor.shape().str());
      continue;
    }
    std::copy(t->data.begin(), t->data.end(), e.tensor.vec().begin());
    rep.loaded.push_back(e.name);
  }
  for (const auto& [name, u] : used)
    if (!u) rep.unused.push_back(name);
  if (rep.loaded.empty()) rep.warning = "no checkpoint tensor matched the target model";
  return rep;
}

}  // namespace nabla
