#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latentlens/tensor.hpp"

namespace latentlens {

/// Named-tensor bundle persisted in the LLCK format:
/// magic "LLCK", u16 version=1, u32 entry count, then per entry
/// u16 name length + UTF-8 name, u8 rank, rank x u32 dims, raw f32 values.
struct ModelCheckpoint {
  struct Entry {
    std::string name;
    Tensor tensor;
  };
  std::vector<Entry> entries;

  void add(std::string name, const Tensor& t) { entries.push_back({std::move(name), t.detach()}); }
  const Tensor* find(const std::string& name) const;
  const Tensor& at(const std::string& name) const;

  /// Entries whose name starts with `prefix`, with the prefix stripped.
  ModelCheckpoint subset(const std::string& prefix) const;
  void merge(const ModelCheckpoint& other, const std::string& prefix);
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ModelCheckpoint& ckpt);
ModelCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint read_checkpoint(const std::filesystem::path& path);

/// FNV-1a 64 over the encoded bytes, as 16 hex digits.
std::string checkpoint_checksum(const ModelCheckpoint& ckpt);

}  // namespace latentlens
