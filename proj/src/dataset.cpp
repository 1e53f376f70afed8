#include "latentlens/dataset.hpp"

#include <algorithm>
#include <numeric>

#include "latentlens/binio.hpp"

namespace latentlens {

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  std::vector<float> data(indices.size() * image_size());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    auto img = image(indices[n]);
    std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(n * image_size()));
  }
  return Tensor({static_cast<std::int64_t>(indices.size()), 1, height, width}, std::move(data));
}

Dataset generate_dataset(std::size_t count, int height, int width, std::uint64_t seed, bool noise) {
  if (count == 0) throw Error(ErrorCategory::config, "dataset: count must be positive");
  Dataset ds;
  ds.height = height;
  ds.width = width;
  ds.factor_names.assign(kFactorNames.begin(), kFactorNames.end());
  ds.factors.reserve(count);
  ds.pixels.reserve(count * static_cast<std::size_t>(height) * width);
  const Rng params_root(seed, 1), noise_root(seed, 2);
  for (std::size_t i = 0; i < count; ++i) {
    Rng prng = params_root.fork(i);
    const PhantomParams p = sample_params(prng);
    std::optional<std::uint64_t> noise_seed;
    if (noise) noise_seed = noise_root.fork(i).next_u64();
    const auto img = window_normalize(render_phantom(p, height, width, noise_seed));
    ds.factors.push_back(p.to_array());
    ds.pixels.insert(ds.pixels.end(), img.values.begin(), img.values.end());
  }
  return ds;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  if (ds.factor_names.size() != kFactorCount) throw Error(ErrorCategory::format, "dataset: expected 8 factor names");
  if (ds.pixels.size() != ds.count() * ds.image_size()) throw Error(ErrorCategory::format, "dataset: pixel count mismatch");
  ByteWriter w;
  w.bytes("LLDS");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.count()));
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  w.u8(static_cast<std::uint8_t>(kFactorCount));
  for (const auto& name : ds.factor_names) w.short_string(name, "factor name");
  for (std::size_t i = 0; i < ds.count(); ++i) {
    for (float f : ds.factors[i]) w.f32(f);
    for (float v : ds.image(i)) w.f32(v);
  }
  return w.take();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "dataset");
  if (r.remaining() < 4 || r.bytes(4) != "LLDS") throw Error(ErrorCategory::format, "dataset: bad magic (expected LLDS)");
  const auto version = r.u16();
  if (version != kDatasetVersion) throw Error(ErrorCategory::format, "dataset: unsupported version " + std::to_string(version));
  const std::uint64_t count = r.u32(), height = r.u32(), width = r.u32();
  const auto factor_count = r.u8();
  if (factor_count != kFactorCount) {
    throw Error(ErrorCategory::format, "dataset: factor_count " + std::to_string(factor_count) + ", expected 8");
  }
  if (count == 0 || height == 0 || width == 0) throw Error(ErrorCategory::format, "dataset: empty dimensions in header");
  // Each dim is < 2^32, so the products below cannot overflow 64 bits until
  // the count multiply; check that one against the payload first.
  const std::uint64_t per_sample = (kFactorCount + height * width) * 4;
  if (height > 65535 || width > 65535 || height * width > (1ULL << 31)) throw Error(ErrorCategory::format, "dataset: dim overflow (H*W too large)");

  Dataset ds;
  ds.height = static_cast<int>(height);
  ds.width = static_cast<int>(width);
  for (std::size_t i = 0; i < kFactorCount; ++i) ds.factor_names.push_back(r.short_string());
  if (count > r.remaining() / per_sample) {
    throw Error(ErrorCategory::format, "dataset: truncated (header declares " + std::to_string(count) +
                                           " samples, payload holds " + std::to_string(r.remaining() / per_sample) + ")");
  }
  ds.factors.resize(count);
  ds.pixels.resize(count * height * width);
  std::size_t p = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    for (auto& f : ds.factors[i]) f = r.f32();
    for (std::uint64_t j = 0; j < height * width; ++j) ds.pixels[p++] = r.f32();
  }
  if (r.remaining() != 0) throw Error(ErrorCategory::format, "dataset: " + std::to_string(r.remaining()) + " trailing bytes");
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) { write_file_atomic(path, encode_dataset(ds)); }

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

Split split_dataset(std::size_t count, std::uint64_t seed, double test_fraction) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, 3);
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t n_test = static_cast<std::size_t>(static_cast<double>(count) * test_fraction + 0.5);
  if (count >= 2) n_test = std::clamp<std::size_t>(n_test, 1, count - 1);
  Split s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  return s;
}

}  // namespace latentlens
