#include "latentlens/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "latentlens/error.hpp"

namespace latentlens {

std::array<float, kFactorCount> PhantomParams::to_array() const {
  return {body_width, body_height, rotation, y_offset, z_position, tissue_thickness, breast_size, lung_fill};
}

PhantomParams PhantomParams::from_array(std::span<const float> v) {
  if (v.size() != kFactorCount) throw Error(ErrorCategory::data, "phantom params: expected 8 factors");
  return {v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
}

float lung_fill_for(float z_position) {
  return std::clamp(static_cast<float>(std::sin(std::numbers::pi * z_position)), 0.05f, 1.0f);
}

PhantomParams sample_params(Rng& rng) {
  auto draw = [&](FactorRange r) { return static_cast<float>(rng.uniform(r.lo, r.hi)); };
  PhantomParams p;
  p.body_width = draw(kBodyWidthRange);
  p.body_height = draw(kBodyHeightRange);
  p.rotation = draw(kRotationRange);
  p.y_offset = draw(kYOffsetRange);
  p.z_position = draw(kZPositionRange);
  p.tissue_thickness = draw(kThicknessRange);
  p.breast_size = draw(kBreastRange);
  p.lung_fill = lung_fill_for(p.z_position);
  return p;
}

namespace {

constexpr int kSupersample = 4;

struct Ellipse {
  double cu, cv, ru, rv;
  bool contains(double u, double v) const {
    const double x = (u - cu) / ru, y = (v - cv) / rv;
    return x * x + y * y <= 1.0;
  }
};

// Body-frame geometry derived from the factors, in pixels.
struct Anatomy {
  Ellipse body, inner, lung_right, lung_left;
  double breast_cu, breast_cv, breast_r;
  double liver_fraction;
  double vert_cv, vert_r;
  bool sternum;
  double sternum_half_u, sternum_v0, sternum_v1;

  explicit Anatomy(const PhantomParams& p, int height, int width) {
    const double a = p.body_width * width / 2.0;
    const double b = p.body_height * height / 2.0;
    const double rim = p.tissue_thickness * std::min(width, height) / 2.0;
    const double ai = std::max(a - rim, 0.5), bi = std::max(b - rim, 0.5);
    body = {0, 0, a, b};
    inner = {0, 0, ai, bi};
    const double s = std::sqrt(static_cast<double>(p.lung_fill));
    // Patient right is image left.
    lung_right = {-0.42 * ai, -0.05 * bi, 0.36 * ai * s, 0.62 * bi * s};
    lung_left = {0.42 * ai, -0.05 * bi, 0.36 * ai * s, 0.62 * bi * s};
    breast_cu = 0.45 * a;
    breast_cv = -b * std::sqrt(1.0 - 0.45 * 0.45);
    breast_r = 0.5 * p.breast_size * a;
    liver_fraction = std::max(0.0, p.z_position - 0.7) / 0.3;
    vert_cv = 0.72 * bi;
    vert_r = 0.18 * std::min(ai, bi);
    sternum = p.z_position < 0.6f;
    sternum_half_u = 0.07 * ai;
    sternum_v0 = -0.93 * bi;
    sternum_v1 = -0.80 * bi;
  }

  bool in_body(double u, double v) const {
    if (body.contains(u, v)) return true;
    return in_breast(u, v);
  }

  bool in_breast(double u, double v) const {
    if (breast_r <= 0) return false;
    for (double cu : {-breast_cu, breast_cu}) {
      const double du = u - cu, dv = v - breast_cv;
      if (du * du + dv * dv <= breast_r * breast_r) return true;
    }
    return false;
  }

  // Back-to-front composition; later structures overwrite earlier ones.
  float label(double u, double v) const {
    float value = hu::air;
    if (body.contains(u, v)) value = hu::fat;
    if (!inner.contains(u, v) && in_breast(u, v)) value = hu::breast;
    if (!inner.contains(u, v)) return value;
    value = hu::tissue;
    if (lung_right.contains(u, v)) {
      const double t = (v - lung_right.cv) / lung_right.rv;
      value = (liver_fraction > 0 && t >= 1.0 - 2.0 * liver_fraction) ? hu::liver : hu::lung;
    } else if (lung_left.contains(u, v)) {
      value = hu::lung;
    }
    const double dv = v - vert_cv;
    if (u * u + dv * dv <= vert_r * vert_r) value = hu::bone;
    if (sternum && std::abs(u) <= sternum_half_u && v >= sternum_v0 && v <= sternum_v1) value = hu::bone;
    return value;
  }
};

}  // namespace

HuImage render_phantom(const PhantomParams& p, int height, int width, std::optional<std::uint64_t> noise_seed) {
  if (height < 16 || width < 16) {
    throw Error(ErrorCategory::config, "render_phantom: image must be at least 16x16");
  }
  const Anatomy anatomy(p, height, width);
  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0 + static_cast<double>(p.y_offset) * height;
  const double theta = static_cast<double>(p.rotation) * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);

  HuImage img{height, width, std::vector<float>(static_cast<std::size_t>(height) * width)};
  std::optional<Rng> noise;
  if (noise_seed) noise.emplace(*noise_seed);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      float acc = 0;
      int inside = 0;
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double dx = x + (sx + 0.5) / kSupersample - 0.5 - cx;
          const double dy = y + (sy + 0.5) / kSupersample - 0.5 - cy;
          const double u = dx * c + dy * s;
          const double v = -dx * s + dy * c;
          acc += anatomy.label(u, v);
          inside += anatomy.in_body(u, v);
        }
      }
      float value = acc / (kSupersample * kSupersample);
      // Draw for every pixel so the noise field does not depend on geometry.
      if (noise) {
        const float n = static_cast<float>(noise->normal() * hu::texture_sigma);
        if (2 * inside > kSupersample * kSupersample) value += n;
      }
      img.values[static_cast<std::size_t>(y) * width + x] = value;
    }
  }
  return img;
}

float window_normalize(float v) {
  const float clipped = std::clamp(v, kWindowMinHu, kWindowMaxHu);
  return (clipped - kWindowMinHu) / 1500.0f - 1.0f;
}

NormalizedImage window_normalize(const HuImage& img) {
  NormalizedImage out{img.height, img.width, std::vector<float>(img.values.size())};
  std::transform(img.values.begin(), img.values.end(), out.values.begin(), [](float v) { return window_normalize(v); });
  return out;
}

}  // namespace latentlens
