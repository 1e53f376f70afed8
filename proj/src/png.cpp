#include "latentlens/png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>

#include "latentlens/binio.hpp"
#include "latentlens/error.hpp"

namespace latentlens {

std::uint8_t to_gray8(float v) {
  const double scaled = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

namespace {

thread_local char png_message[256];

void on_png_error(png_structp png, png_const_charp msg) {
  std::snprintf(png_message, sizeof png_message, "%s", msg);
  png_longjmp(png, 1);
}
void on_png_warning(png_structp, png_const_charp) {}

void append_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void read_bytes(png_structp png, png_bytep data, png_size_t n) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->offset + n > cur->bytes.size()) png_error(png, "truncated stream");
  std::memcpy(data, cur->bytes.data() + cur->offset, n);
  cur->offset += n;
}

}  // namespace

std::vector<std::uint8_t> encode_png(std::span<const float> pixels, int height, int width) {
  if (height < 1 || width < 1 || pixels.size() != static_cast<std::size_t>(height) * width) {
    throw Error(ErrorCategory::shape, "encode_png: " + std::to_string(pixels.size()) + " pixels for " +
                                          std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<std::uint8_t> gray(pixels.size());
  std::transform(pixels.begin(), pixels.end(), gray.begin(), to_gray8);
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!png) throw Error(ErrorCategory::io, "encode_png: out of memory");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error(ErrorCategory::io, "encode_png: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCategory::io, std::string("encode_png: ") + png_message);
  }
  {
    png_set_write_fn(png, &out, append_bytes, nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) png_write_row(png, gray.data() + static_cast<std::size_t>(y) * width);
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, std::span<const float> pixels, int height, int width) {
  write_file_atomic(path, encode_png(pixels, height, width));
}

Gray8Image decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw Error(ErrorCategory::format, "decode_png: missing PNG signature");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
  if (!png) throw Error(ErrorCategory::io, "decode_png: out of memory");
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{bytes};
  Gray8Image img;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error(ErrorCategory::io, "decode_png: out of memory");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCategory::format, std::string("decode_png: ") + png_message);
  }
  png_set_read_fn(png, &cursor, read_bytes);
  png_read_info(png, info);
  const bool gray8 = png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) == 8;
  if (gray8) {
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!gray8) throw Error(ErrorCategory::format, "decode_png: expected 8-bit grayscale");
  return img;
}

std::vector<float> tile_grid(const Tensor& images, int rows, int cols) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(0) != static_cast<std::int64_t>(rows) * cols) {
    throw Error(ErrorCategory::shape, "tile_grid: " + std::to_string(rows) + "x" + std::to_string(cols) +
                                          " grid from " + shape_str(images.shape()));
  }
  const auto h = images.dim(2), w = images.dim(3);
  const auto out_w = w * cols;
  std::vector<float> out(static_cast<std::size_t>(h * rows * out_w));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const float* tile = images.data().data() + (static_cast<std::int64_t>(r) * cols + c) * h * w;
      for (std::int64_t y = 0; y < h; ++y) std::copy(tile + y * w, tile + (y + 1) * w, out.data() + (r * h + y) * out_w + c * w);
    }
  return out;
}

}  // namespace latentlens
