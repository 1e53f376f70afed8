#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "latentlens/error.hpp"
#include "latentlens/phantom.hpp"

using namespace latentlens;

namespace {

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// Pixels below `threshold` that cannot reach the border through other such
// pixels, i.e. air pockets enclosed by the body.
int enclosed_dark_pixels(const HuImage& img, float threshold) {
  const int h = img.height, w = img.width;
  std::vector<int> state(img.values.size(), 0);  // 0 unseen, 1 reached from border
  std::vector<int> stack;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if ((y == 0 || x == 0 || y == h - 1 || x == w - 1) && img.values[y * w + x] < threshold) {
        state[y * w + x] = 1;
        stack.push_back(y * w + x);
      }
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    const int y = i / w, x = i % w;
    for (auto [ny, nx] : {std::pair{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}) {
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      const int j = ny * w + nx;
      if (!state[j] && img.values[j] < threshold) {
        state[j] = 1;
        stack.push_back(j);
      }
    }
  }
  int count = 0;
  for (std::size_t i = 0; i < img.values.size(); ++i) count += img.values[i] < threshold && !state[i];
  return count;
}

int components_above(const HuImage& img, float threshold) {
  const int h = img.height, w = img.width;
  std::vector<int> seen(img.values.size(), 0);
  int components = 0;
  for (int s = 0; s < h * w; ++s) {
    if (seen[s] || img.values[s] <= threshold) continue;
    ++components;
    std::vector<int> stack{s};
    seen[s] = 1;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      const int y = i / w, x = i % w;
      for (auto [ny, nx] : {std::pair{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}}) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const int j = ny * w + nx;
        if (!seen[j] && img.values[j] > threshold) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return components;
}

// Second moment of the body mask (HU > -500) about the vertical centre line.
double horizontal_moment(const HuImage& img) {
  double acc = 0;
  const double cx = (img.width - 1) / 2.0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (img.values[y * img.width + x] > -500) acc += (x - cx) * (x - cx);
  return acc;
}

}  // namespace

TEST(SampleParams, SeedDeterminesDraw) {
  Rng a(42), b(42);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(sample_params(a).to_array(), sample_params(b).to_array());
}

TEST(SampleParams, DrawsStayInRangesAndAreUncorrelated) {
  Rng rng(11);
  constexpr int n = 10000;
  const FactorRange ranges[] = {kBodyWidthRange, kBodyHeightRange, kRotationRange, kYOffsetRange,
                                kZPositionRange, kThicknessRange,  kBreastRange};
  std::vector<std::vector<double>> cols(7);
  for (int i = 0; i < n; ++i) {
    const auto p = sample_params(rng);
    const auto v = p.to_array();
    for (int f = 0; f < 7; ++f) {
      EXPECT_GE(v[f], ranges[f].lo);
      EXPECT_LE(v[f], ranges[f].hi);
      cols[f].push_back(v[f]);
    }
    EXPECT_EQ(p.lung_fill, lung_fill_for(p.z_position));
  }
  for (int a = 0; a < 7; ++a)
    for (int b = a + 1; b < 7; ++b) EXPECT_LT(std::abs(pearson(cols[a], cols[b])), 0.05) << a << " vs " << b;
}

TEST(LungFill, FollowsClippedSine) {
  EXPECT_FLOAT_EQ(lung_fill_for(0.5f), 1.0f);
  EXPECT_FLOAT_EQ(lung_fill_for(0.0f), 0.05f);
  EXPECT_FLOAT_EQ(lung_fill_for(1.0f), 0.05f);
  EXPECT_NEAR(lung_fill_for(0.25f), std::sin(M_PI / 4), 1e-6);
}

TEST(RenderPhantom, UprightNoiseFreeSliceIsMirrorSymmetric) {
  PhantomParams p;
  p.rotation = 0;
  p.y_offset = 0;
  p.breast_size = 0.2f;
  p.z_position = 0.5f;
  p.lung_fill = lung_fill_for(p.z_position);
  for (int size : {32, 33, 64}) {
    const auto img = render_phantom(p, size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        ASSERT_EQ(img.values[y * size + x], img.values[y * size + (size - 1 - x)]) << size << " " << y << "," << x;
  }
}

TEST(RenderPhantom, MidThoraxHasMoreLungThanApex) {
  PhantomParams mid, apex;
  mid.z_position = 0.5f;
  mid.lung_fill = lung_fill_for(0.5f);
  apex.z_position = 0.05f;
  apex.lung_fill = lung_fill_for(0.05f);
  const int lung_mid = enclosed_dark_pixels(render_phantom(mid, 32, 32), -500);
  const int lung_apex = enclosed_dark_pixels(render_phantom(apex, 32, 32), -500);
  EXPECT_GT(lung_mid, lung_apex);
  EXPECT_GT(lung_mid, 0);
}

TEST(RenderPhantom, WiderBodyHasLargerHorizontalMoment) {
  PhantomParams narrow, wide;
  narrow.body_width = 0.6f;
  wide.body_width = 0.8f;
  EXPECT_GT(horizontal_moment(render_phantom(wide, 32, 32)), horizontal_moment(render_phantom(narrow, 32, 32)));
}

TEST(RenderPhantom, BodyIsOneComponentAndValuesInRange) {
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto p = sample_params(rng);
    const auto img = render_phantom(p, 32, 32, rng.next_u64());
    EXPECT_EQ(components_above(img, -500), 1) << "sample " << i;
    for (float v : img.values) {
      ASSERT_GE(v, -1024.0f);
      ASSERT_LE(v, 3000.0f);
    }
  }
}

TEST(RenderPhantom, NoiseIsSeededAndConfinedToBody) {
  PhantomParams p;
  const auto clean = render_phantom(p, 32, 32);
  const auto a = render_phantom(p, 32, 32, 7), b = render_phantom(p, 32, 32, 7), c = render_phantom(p, 32, 32, 8);
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, c.values);
  for (std::size_t i = 0; i < clean.values.size(); ++i)
    if (clean.values[i] == hu::air) EXPECT_EQ(a.values[i], hu::air);
}

TEST(RenderPhantom, RejectsTinyImagesAndClipsLargeGeometry) {
  EXPECT_THROW(render_phantom({}, 15, 32), Error);
  PhantomParams big;
  big.body_width = 0.95f;
  big.body_height = 0.8f;
  big.y_offset = 0.15f;
  big.rotation = 20;
  const auto img = render_phantom(big, 16, 16);
  EXPECT_EQ(img.values.size(), 256u);
}

TEST(WindowNormalize, EndpointsMidpointAndClipping) {
  EXPECT_EQ(window_normalize(-1000.0f), -1.0f);
  EXPECT_EQ(window_normalize(2000.0f), 1.0f);
  EXPECT_EQ(window_normalize(500.0f), 0.0f);
  EXPECT_EQ(window_normalize(3000.0f), 1.0f);
  EXPECT_EQ(window_normalize(-1024.0f), -1.0f);
}

TEST(WindowNormalize, MonotoneAndInvertibleInsideWindow) {
  float prev = -2;
  for (float v = -1100; v <= 2100; v += 7.5f) {
    const float out = window_normalize(v);
    EXPECT_GE(out, prev);
    prev = out;
    if (v >= -1000 && v <= 2000) EXPECT_NEAR((out + 1) * 1500 - 1000, v, 1e-3);
  }
  HuImage img{2, 2, {-1000, 0, 500, 2500}};
  const auto n = window_normalize(img);
  EXPECT_EQ(n.values, (std::vector<float>{-1.0f, window_normalize(0.0f), 0.0f, 1.0f}));
}
