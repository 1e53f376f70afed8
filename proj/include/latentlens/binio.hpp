#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latentlens/error.hpp"

namespace latentlens {

/// Little-endian byte sink for the binary file formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  /// u16 length prefix followed by the raw UTF-8 bytes.
  void short_string(std::string_view s, std::string_view what) {
    if (s.size() > UINT16_MAX) throw Error(ErrorCategory::format, std::string(what) + " longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  template <class T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian reader. Running off the end is a
/// format error tagged "truncated".
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string context) : data_(data), context_(std::move(context)) {}

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::string bytes(std::size_t n) {
    require(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::string short_string() { return bytes(u16()); }

  void require(std::size_t n) const {
    if (n > data_.size() - pos_) {
      throw Error(ErrorCategory::format, context_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                                             std::to_string(pos_) + ", " + std::to_string(data_.size() - pos_) +
                                             " left)");
    }
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t offset() const { return pos_; }
  const std::string& context() const { return context_; }

 private:
  template <class T>
  T get() {
    require(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace latentlens
