#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "latentlens/rng.hpp"

namespace latentlens {

inline constexpr std::size_t kFactorCount = 8;
inline constexpr std::array<std::string_view, kFactorCount> kFactorNames = {
    "body_width", "body_height", "rotation", "y_offset", "z_position", "tissue_thickness", "breast_size", "lung_fill"};

/// Ground-truth generative factors of one synthetic thorax slice.
struct PhantomParams {
  float body_width = 0.7f;         // fraction of image width, (0.4, 0.95)
  float body_height = 0.55f;       // fraction of image height, (0.3, 0.8)
  float rotation = 0.0f;           // degrees, (-20, 20)
  float y_offset = 0.0f;           // fraction of image height, (-0.15, 0.15)
  float z_position = 0.5f;         // 0 = apex, 1 = below the diaphragm
  float tissue_thickness = 0.08f;  // subcutaneous rim, (0.02, 0.15)
  float breast_size = 0.0f;        // anterior bulge, [0, 0.25]
  float lung_fill = 1.0f;          // derived from z_position

  std::array<float, kFactorCount> to_array() const;
  static PhantomParams from_array(std::span<const float> values);
};

struct FactorRange {
  float lo, hi;
};
inline constexpr FactorRange kBodyWidthRange{0.4f, 0.95f};
inline constexpr FactorRange kBodyHeightRange{0.3f, 0.8f};
inline constexpr FactorRange kRotationRange{-20.0f, 20.0f};
inline constexpr FactorRange kYOffsetRange{-0.15f, 0.15f};
inline constexpr FactorRange kZPositionRange{0.0f, 1.0f};
inline constexpr FactorRange kThicknessRange{0.02f, 0.15f};
inline constexpr FactorRange kBreastRange{0.0f, 0.25f};

/// sin(pi z) clipped to [0.05, 1].
float lung_fill_for(float z_position);

/// Independent uniform draws over the factor ranges; lung_fill follows z.
PhantomParams sample_params(Rng& rng);

// HU tissue values used by the renderer.
namespace hu {
inline constexpr float air = -1000, fat = -100, tissue = 40, lung = -800, bone = 700, liver = 60, breast = -50;
inline constexpr float texture_sigma = 20;
}  // namespace hu

struct HuImage {
  int height = 0, width = 0;
  std::vector<float> values;
};

struct NormalizedImage {
  int height = 0, width = 0;
  std::vector<float> values;
};

/// Renders one slice in HU. Each pixel averages a 4x4 grid of sub-samples.
/// Texture noise is drawn from `noise_seed` when given; without it the
/// render is noise-free. Geometry leaving the image is clipped.
HuImage render_phantom(const PhantomParams& params, int height, int width,
                       std::optional<std::uint64_t> noise_seed = std::nullopt);

inline constexpr float kWindowMinHu = -1000, kWindowMaxHu = 2000;

/// Fixed-window min-max map: clip to [-1000, 2000] HU, then affine to [-1, 1].
float window_normalize(float hu_value);
NormalizedImage window_normalize(const HuImage& img);

}  // namespace latentlens
