#include "latentlens/checkpoint.hpp"

#include "latentlens/binio.hpp"

namespace latentlens {

const Tensor* ModelCheckpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

const Tensor& ModelCheckpoint::at(const std::string& name) const {
  if (const auto* t = find(name)) return *t;
  throw Error(ErrorCategory::format, "checkpoint: missing entry '" + name + "'");
}

ModelCheckpoint ModelCheckpoint::subset(const std::string& prefix) const {
  ModelCheckpoint out;
  for (const auto& e : entries) {
    if (e.name.starts_with(prefix)) out.entries.push_back({e.name.substr(prefix.size()), e.tensor});
  }
  return out;
}

void ModelCheckpoint::merge(const ModelCheckpoint& other, const std::string& prefix) {
  for (const auto& e : other.entries) entries.push_back({prefix + e.name, e.tensor});
}

std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ckpt) {
  ByteWriter w;
  w.bytes("LLCK");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.short_string(e.name, "checkpoint entry name");
    const auto& shape = e.tensor.shape();
    if (shape.size() > UINT8_MAX) throw Error(ErrorCategory::format, "checkpoint: rank too large for '" + e.name + "'");
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) {
      if (d > static_cast<std::int64_t>(UINT32_MAX)) throw Error(ErrorCategory::format, "checkpoint: dim overflow in '" + e.name + "'");
      w.u32(static_cast<std::uint32_t>(d));
    }
    for (float v : e.tensor.data()) w.f32(v);
  }
  return w.take();
}

ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "checkpoint");
  if (r.remaining() < 4 || r.bytes(4) != "LLCK") throw Error(ErrorCategory::format, "checkpoint: bad magic (expected LLCK)");
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCategory::format, "checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = r.u32();
  ModelCheckpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.short_string();
    const auto rank = r.u8();
    Shape shape;
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto extent = r.u32();
      if (extent == 0) throw Error(ErrorCategory::format, "checkpoint: zero extent in '" + name + "'");
      numel *= extent;
      if (numel > r.remaining() / 4) {
        throw Error(ErrorCategory::format, "checkpoint: dims of '" + name + "' exceed payload (truncated or dim overflow)");
      }
      shape.push_back(extent);
    }
    r.require(numel * 4);
    std::vector<float> data(numel);
    for (auto& v : data) v = r.f32();
    ckpt.entries.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCategory::format, "checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

ModelCheckpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

std::string checkpoint_checksum(const ModelCheckpoint& ckpt) { return hex64(fnv1a64(encode_checkpoint(ckpt))); }

}  // namespace latentlens
