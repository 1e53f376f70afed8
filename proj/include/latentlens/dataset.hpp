#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "latentlens/phantom.hpp"
#include "latentlens/tensor.hpp"

namespace latentlens {

/// Normalized phantom images stored alongside their generative factors.
struct Dataset {
  int height = 0, width = 0;
  std::vector<std::string> factor_names;
  std::vector<std::array<float, kFactorCount>> factors;
  std::vector<float> pixels;  // count * height * width, row-major per image

  std::size_t count() const { return factors.size(); }
  std::size_t image_size() const { return static_cast<std::size_t>(height) * width; }
  std::span<const float> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }

  /// [n, 1, H, W] batch of the given samples.
  Tensor batch(std::span<const std::size_t> indices) const;

  bool operator==(const Dataset&) const = default;
};

/// Renders `count` phantoms. Sample i draws its factors from stream (seed, 1, i)
/// and its texture noise from (seed, 2, i).
Dataset generate_dataset(std::size_t count, int height, int width, std::uint64_t seed, bool noise = true);

inline constexpr std::uint16_t kDatasetVersion = 1;

/// LLDS layout: magic "LLDS", u16 version=1, u32 count, u32 H, u32 W,
/// u8 factor_count=8, factor names (u16 length + UTF-8), then per sample
/// 8 x f32 factors followed by H*W x f32 pixels. Little-endian throughout.
std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& path);

struct Split {
  std::vector<std::size_t> train, test;
};

/// Seeded shuffle into train/test with the given test fraction (at least one
/// sample on each side when count >= 2).
Split split_dataset(std::size_t count, std::uint64_t seed, double test_fraction = 0.1);

}  // namespace latentlens
