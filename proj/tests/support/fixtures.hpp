#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentlens/binio.hpp"
#include "latentlens/checkpoint.hpp"
#include "latentlens/dataset.hpp"

namespace latentlens::testsupport {

// A corrupted file together with the error it must produce.
struct CorruptFixture {
  std::string name;
  std::vector<std::uint8_t> bytes;
  ErrorCategory category;
  std::string message;  // substring of what()
};

inline void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

inline Dataset small_dataset() { return generate_dataset(6, 16, 16, 99); }

inline ModelCheckpoint small_checkpoint() {
  Rng rng(3);
  ModelCheckpoint c;
  c.add("g.fc.weight", Tensor::randn({4, 3}, rng));
  c.add("g.fc.bias", Tensor::randn({4}, rng));
  c.add("scalar", Tensor::scalar(2.5f));
  return c;
}

// Header offsets: LLDS magic 0, version 4, count 6, H 10, W 14, factor_count 18.
inline std::vector<CorruptFixture> dataset_fixtures() {
  const auto good = encode_dataset(small_dataset());
  std::vector<CorruptFixture> out;
  auto bad_magic = good;
  bad_magic[0] = 'X';
  out.push_back({"LLDS bad magic", bad_magic, ErrorCategory::format, "bad magic"});
  auto version = good;
  version[4] = 2;
  out.push_back({"LLDS unsupported version", version, ErrorCategory::format, "unsupported version"});
  auto count = good;
  put_u32(count, 6, 7);
  out.push_back({"LLDS count exceeds payload", count, ErrorCategory::format, "truncated"});
  auto cut = good;
  cut.resize(cut.size() - 3);
  out.push_back({"LLDS cut payload", cut, ErrorCategory::format, "truncated"});
  auto overflow = good;
  put_u32(overflow, 10, 0xFFFFFFFFu);
  out.push_back({"LLDS dim overflow", overflow, ErrorCategory::format, "dim overflow"});
  auto factors = good;
  factors[18] = 7;
  out.push_back({"LLDS factor count", factors, ErrorCategory::format, "factor_count"});
  auto trailing = good;
  trailing.push_back(0);
  out.push_back({"LLDS trailing bytes", trailing, ErrorCategory::format, "trailing"});
  out.push_back({"LLDS header only", std::vector<std::uint8_t>(good.begin(), good.begin() + 10), ErrorCategory::format,
                 "truncated"});
  return out;
}

// Header offsets: LLCK magic 0, version 4, entry count 6, first name length 10.
inline std::vector<CorruptFixture> checkpoint_fixtures() {
  const auto good = encode_checkpoint(small_checkpoint());
  std::vector<CorruptFixture> out;
  auto bad_magic = good;
  bad_magic[3] = 'X';
  out.push_back({"LLCK bad magic", bad_magic, ErrorCategory::format, "bad magic"});
  auto version = good;
  version[4] = 9;
  out.push_back({"LLCK unsupported version", version, ErrorCategory::format, "unsupported version"});
  auto count = good;
  put_u32(count, 6, 4);
  out.push_back({"LLCK count exceeds payload", count, ErrorCategory::format, "truncated"});
  auto cut = good;
  cut.resize(cut.size() - 1);
  out.push_back({"LLCK cut payload", cut, ErrorCategory::format, "truncated"});
  // First entry: name "g.fc.weight" (11 bytes) at 12, rank at 23, dims at 24.
  auto overflow = good;
  put_u32(overflow, 24, 0x7FFFFFFFu);
  out.push_back({"LLCK dim overflow", overflow, ErrorCategory::format, "exceed payload"});
  auto zero = good;
  put_u32(zero, 24, 0);
  out.push_back({"LLCK zero extent", zero, ErrorCategory::format, "zero extent"});
  auto trailing = good;
  trailing.push_back(1);
  out.push_back({"LLCK trailing bytes", trailing, ErrorCategory::format, "trailing"});
  return out;
}

}  // namespace latentlens::testsupport
