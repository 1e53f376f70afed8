#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "latentlens/tensor.hpp"

namespace latentlens {

/// round(127.5 (v + 1)) clamped to [0, 255].
std::uint8_t to_gray8(float v);

struct Gray8Image {
  int height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

/// 8-bit grayscale PNG of [-1, 1] pixels.
std::vector<std::uint8_t> encode_png(std::span<const float> pixels, int height, int width);
void write_png(const std::filesystem::path& path, std::span<const float> pixels, int height, int width);

/// Decodes an 8-bit grayscale PNG; anything else is a format error.
Gray8Image decode_png(std::span<const std::uint8_t> bytes);

/// Tiles a [rows * cols, 1, H, W] batch row-major into one [rows H, cols W]
/// image.
std::vector<float> tile_grid(const Tensor& images, int rows, int cols);

}  // namespace latentlens
