#include "latentlens/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "latentlens/adam.hpp"
#include "latentlens/losses.hpp"

namespace latentlens {

FeatureStats feature_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) {
    throw Error(ErrorCategory::data, "feature_stats: need at least 2 samples, got " + std::to_string(features.rows()));
  }
  FeatureStats s;
  s.count = static_cast<std::size_t>(features.rows());
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  return s;
}

FeatureStats feature_stats(const Tensor& features) {
  if (features.rank() != 2) {
    throw Error(ErrorCategory::shape, "feature_stats: features must be [N, m], got " + shape_str(features.shape()));
  }
  Eigen::MatrixXd m(features.dim(0), features.dim(1));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = features[i * m.cols() + j];
  return feature_stats(m);
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size()) {
    throw Error(ErrorCategory::shape, "frechet_distance: feature dims " + std::to_string(a.mean.size()) + " vs " +
                                          std::to_string(b.mean.size()));
  }
  if (a.mean == b.mean && a.cov == b.cov) return 0.0;
  const Eigen::MatrixXd ra = psd_sqrt(a.cov);
  const Eigen::MatrixXd inner = ra * b.cov * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(d, 0.0);
}

// ---------------------------------------------------------------------------

namespace {

// Largest 4-connected component of the thresholded image, with enclosed
// holes (lungs) filled in.
std::vector<std::uint8_t> body_mask(std::span<const float> px, int h, int w) {
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<int> comp(n, -1);
  std::vector<std::size_t> stack;
  int best = -1;
  std::size_t best_size = 0;
  int label = 0;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (px[seed] <= kBodyThreshold || comp[seed] >= 0) continue;
    std::size_t size = 0;
    stack.push_back(seed);
    comp[seed] = label;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
        const std::size_t j = static_cast<std::size_t>(q[0]) * w + q[1];
        if (px[j] > kBodyThreshold && comp[j] < 0) {
          comp[j] = label;
          stack.push_back(j);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best = label;
    }
    ++label;
  }
  std::vector<std::uint8_t> mask(n, 0);
  if (best < 0) return mask;
  for (std::size_t i = 0; i < n; ++i) mask[i] = comp[i] == best;

  // Flood the outside from the border; whatever it cannot reach is a hole.
  std::vector<std::uint8_t> outside(n, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (y != 0 && y != h - 1 && x != 0 && x != w - 1) continue;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!mask[i] && !outside[i]) {
        outside[i] = 1;
        stack.push_back(i);
      }
    }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
    const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
    for (const auto& q : nb) {
      if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
      const std::size_t j = static_cast<std::size_t>(q[0]) * w + q[1];
      if (!mask[j] && !outside[j]) {
        outside[j] = 1;
        stack.push_back(j);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) mask[i] = !outside[i];
  return mask;
}

double bilinear(std::span<const float> px, int h, int w, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int yy, int xx) -> double {
    if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
    return px[static_cast<std::size_t>(yy) * w + xx];
  };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

// Mirror asymmetry of a nonnegative map about the axis through (cx, cy) at
// angle theta from vertical.
double asymmetry(std::span<const float> px, int h, int w, double cx, double cy, double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  double acc = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (px[i] == 0) continue;
      const double u = (x - cx) * c + (y - cy) * s;
      const double d = px[i] - bilinear(px, h, w, x - 2 * u * c, y - 2 * u * s);
      acc += d * d;
    }
  return acc;
}

double symmetry_angle(std::span<const float> px, int h, int w, double cx, double cy) {
  constexpr double deg = std::numbers::pi / 180.0;
  double best = 0, best_score = std::numeric_limits<double>::infinity();
  for (int a = -45; a <= 45; ++a) {
    const double score = asymmetry(px, h, w, cx, cy, a * deg);
    if (score < best_score) {
      best_score = score;
      best = a;
    }
  }
  const double center = best;
  for (int k = -10; k <= 10; ++k) {
    const double a = center + 0.1 * k;
    const double score = asymmetry(px, h, w, cx, cy, a * deg);
    if (score < best_score) {
      best_score = score;
      best = a;
    }
  }
  return best;
}

constexpr double kMinAnisotropy = 0.2;
constexpr double kTissueLevel = -0.3, kBoneContrast = 0.43, kBoneWeight = 3.0;
constexpr double kBandFraction = 0.3;

// v-variance of a uniform ellipse restricted to |u| <= t*a, in units of b^2.
double band_variance_ratio(double t) {
  const double r = std::sqrt(1 - t * t);
  const double i1 = t * r + std::asin(t);
  const double i3 = (t * (5 - 2 * t * t) * r + 3 * std::asin(t)) / 4;
  return i3 / i1 / 3;
}

// Normalized intensity step from air to the fat rim.
constexpr double kRimContrast = 0.6;

}  // namespace

std::array<double, kEstimateCount> to_array(const FactorEstimate& e) {
  return {e.width, e.height, e.rotation, e.y_offset, e.lung_area, e.intensity, e.size, e.thickness};
}

FactorEstimate extract_factors(const NormalizedImage& img) {
  return extract_factors(img.values, img.height, img.width);
}

FactorEstimate extract_factors(std::span<const float> px, int h, int w) {
  if (h <= 0 || w <= 0 || px.size() != static_cast<std::size_t>(h) * w) {
    throw Error(ErrorCategory::shape, "extract_factors: pixel count does not match " + std::to_string(h) + "x" +
                                          std::to_string(w));
  }
  const auto mask = body_mask(px, h, w);

  // Pixels on the outer boundary carry their partial-volume coverage, the
  // interior (holes included) counts fully.
  std::vector<double> weight(px.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          if (mask[static_cast<std::size_t>(yy) * w + xx] != mask[i]) {
            edge = true;
            break;
          }
        }
      weight[i] = edge ? std::clamp((px[i] + 1.0) / kRimContrast, 0.0, 1.0) : mask[i];
    }

  double n = 0, wsum = 0, sx = 0, sy = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      n += mask[i];
      wsum += weight[i];
      sx += weight[i] * x;
      sy += weight[i] * y;
    }
  if (n < 3 || wsum <= 0) throw Error(ErrorCategory::data, "extract_factors: no body detected");
  const double cx = sx / wsum, cy = sy / wsum;
  double m20 = 0, m02 = 0, m11 = 0, lung = 0, fat = 0, intensity = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double dx = x - cx, dy = y - cy;
      m20 += weight[i] * dx * dx;
      m02 += weight[i] * dy * dy;
      m11 += weight[i] * dx * dy;
      if (!mask[i]) continue;
      intensity += px[i];
      if (px[i] < kLungThreshold) lung += 1;
      else if (px[i] < kFatThreshold) fat += 1;
    }
  m20 /= wsum;
  m02 /= wsum;
  m11 /= wsum;

  double theta = 0.5 * std::atan2(2 * m11, m20 - m02);
  // The body axis is the principal axis nearest horizontal.
  const double quarter = std::numbers::pi / 4;
  if (theta > quarter) theta -= 2 * quarter;
  if (theta <= -quarter) theta += 2 * quarter;
  const double anisotropy = std::sqrt((m20 - m02) * (m20 - m02) + 4 * m11 * m11) / std::max(m20 + m02, 1e-12);
  if (anisotropy < kMinAnisotropy) {
    // Near-circular outline: take the mirror axis of the outline plus bone.
    std::vector<float> g(px.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = static_cast<float>(weight[i]);
      if (mask[i]) g[i] += static_cast<float>(kBoneWeight * std::clamp((px[i] - kTissueLevel) / kBoneContrast, 0.0, 1.0));
    }
    theta = symmetry_angle(g, h, w, cx, cy) * std::numbers::pi / 180.0;
  }

  const double c = std::cos(theta), s = std::sin(theta);
  const double var_u = c * c * m20 + 2 * c * s * m11 + s * s * m02;
  double var_v = s * s * m20 - 2 * c * s * m11 + c * c * m02;

  // Height from a central band that the anterior bulges never reach,
  // rescaled by the band variance of a uniform ellipse.
  const double half = kBandFraction * 2 * std::sqrt(std::max(var_u, 0.0));
  double bw = 0, bv = 0, bvv = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double u = (x - cx) * c + (y - cy) * s, v = -(x - cx) * s + (y - cy) * c;
      if (std::abs(u) > half || weight[i] == 0) continue;
      bw += weight[i];
      bv += weight[i] * v;
      bvv += weight[i] * v * v;
    }
  if (bw > 0) {
    const double mv = bv / bw;
    var_v = (bvv / bw - mv * mv) / (4 * band_variance_ratio(kBandFraction));
  }

  FactorEstimate e;
  e.width = 4 * std::sqrt(std::max(var_u, 0.0)) / w;
  e.height = 4 * std::sqrt(std::max(var_v, 0.0)) / h;
  e.rotation = theta * 180.0 / std::numbers::pi;
  e.y_offset = (cy - (h - 1) / 2.0) / h;
  e.lung_area = lung / n;
  e.intensity = intensity / n;
  e.size = n / (static_cast<double>(h) * w);
  e.thickness = fat / n;
  return e;
}

// ---------------------------------------------------------------------------

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw Error(ErrorCategory::shape, "spearman: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()) +
                                          " values");
  }
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> linspace(double lo, double hi, int n) {
  if (n < 1) throw Error(ErrorCategory::config, "linspace: need at least one point");
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
  return out;
}

CorrelationRow direction_factor_correlation(const LatentGenerator& g, std::span<const float> direction, int n_z,
                                            std::span<const double> alpha_grid, Rng& rng) {
  if (alpha_grid.size() < 3) {
    throw Error(ErrorCategory::config, "direction_factor_correlation: alpha grid needs at least 3 points, got " +
                                           std::to_string(alpha_grid.size()));
  }
  if (n_z < 1) throw Error(ErrorCategory::config, "direction_factor_correlation: n_z must be positive");
  const int d = g.latent_dim();
  if (static_cast<int>(direction.size()) != d) {
    throw Error(ErrorCategory::shape, "direction_factor_correlation: direction has " +
                                          std::to_string(direction.size()) + " entries, latent dim is " +
                                          std::to_string(d));
  }
  NoGradGuard no_grad;
  const int na = static_cast<int>(alpha_grid.size());
  CorrelationRow row;
  std::array<int, kEstimateCount> used{};
  int failures = 0;
  for (int i = 0; i < n_z; ++i) {
    std::vector<float> z0(d);
    for (auto& v : z0) v = static_cast<float>(rng.normal());
    std::vector<float> zs(static_cast<std::size_t>(na) * d);
    for (int a = 0; a < na; ++a)
      for (int j = 0; j < d; ++j) zs[a * d + j] = z0[j] + static_cast<float>(alpha_grid[a]) * direction[j];
    const Tensor frames = g.generate(Tensor({na, d}, std::move(zs)));
    const int h = g.image_height(), w = g.image_width();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> alphas;
    std::array<std::vector<double>, kEstimateCount> values;
    for (int a = 0; a < na; ++a) {
      try {
        const auto est = to_array(extract_factors(frames.data().subspan(a * plane, plane), h, w));
        alphas.push_back(alpha_grid[a]);
        for (std::size_t f = 0; f < kEstimateCount; ++f) values[f].push_back(est[f]);
      } catch (const Error& e) {
        if (e.category() != ErrorCategory::data) throw;
        ++failures;
      }
    }
    if (alphas.size() < 3) continue;
    for (std::size_t f = 0; f < kEstimateCount; ++f) {
      const double rho = spearman(alphas, values[f]);
      row.mean_rho[f] += rho;
      row.mean_abs_rho[f] += std::abs(rho);
      ++used[f];
    }
  }
  for (std::size_t f = 0; f < kEstimateCount; ++f) {
    if (used[f] == 0) continue;
    row.mean_rho[f] /= used[f];
    row.mean_abs_rho[f] /= used[f];
  }
  row.failure_rate = static_cast<double>(failures) / (static_cast<double>(n_z) * na);
  row.unstable = row.failure_rate > 0.2;
  if (!row.unstable) {
    for (std::size_t f = 0; f < kEstimateCount; ++f) {
      if (row.best_factor < 0 || row.mean_abs_rho[f] > row.best_abs_rho) {
        row.best_factor = static_cast<int>(f);
        row.best_abs_rho = row.mean_abs_rho[f];
      }
    }
  }
  return row;
}

// ---------------------------------------------------------------------------

LatentSearchResult reverse_latent_search(const LatentGenerator& g, std::span<const float> target, int steps,
                                         double lr) {
  const int d = g.latent_dim(), h = g.image_height(), w = g.image_width();
  if (target.size() != static_cast<std::size_t>(h) * w) {
    throw Error(ErrorCategory::shape, "reverse_latent_search: target has " + std::to_string(target.size()) +
                                          " pixels, generator emits " + std::to_string(h) + "x" + std::to_string(w));
  }
  const Tensor goal({1, 1, h, w}, std::vector<float>(target.begin(), target.end()));
  Tensor z = Tensor::zeros({1, d}).set_requires_grad(true);
  Adam<float> opt({{"z", z}}, {.lr = lr});
  LatentSearchResult best{z.vec(), std::numeric_limits<double>::infinity()};
  for (int step = 0; step <= steps; ++step) {
    const Tensor loss = mse(g.generate(z), goal);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw Error(ErrorCategory::numeric, "reverse_latent_search: non-finite residual at step " + std::to_string(step));
    }
    if (value < best.residual) best = {z.vec(), value};
    if (step == steps) break;
    backward(loss);
    opt.step();
  }
  return best;
}

InterpolationReport interpolation_check(const LatentGenerator& g, std::span<const float> z_a,
                                        std::span<const float> z_b, int n_frames) {
  const int d = g.latent_dim();
  if (n_frames < 2) throw Error(ErrorCategory::config, "interpolation_check: need at least 2 frames");
  if (static_cast<int>(z_a.size()) != d || static_cast<int>(z_b.size()) != d) {
    throw Error(ErrorCategory::shape, "interpolation_check: endpoints must have " + std::to_string(d) + " entries");
  }
  NoGradGuard no_grad;
  std::vector<float> zs(static_cast<std::size_t>(n_frames) * d);
  for (int i = 0; i < n_frames; ++i) {
    const double t = static_cast<double>(i) / (n_frames - 1);
    for (int j = 0; j < d; ++j) zs[i * d + j] = static_cast<float>((1 - t) * z_a[j] + t * z_b[j]);
  }
  const Tensor frames = g.generate(Tensor({n_frames, d}, std::move(zs)));
  const std::size_t plane = static_cast<std::size_t>(g.image_height()) * g.image_width();
  InterpolationReport r;
  for (int i = 0; i + 1 < n_frames; ++i) {
    double acc = 0;
    for (std::size_t p = 0; p < plane; ++p) {
      const double diff = static_cast<double>(frames[(i + 1) * plane + p]) - frames[i * plane + p];
      acc += diff * diff;
    }
    r.deltas.push_back(std::sqrt(acc));
  }
  r.max_delta = *std::max_element(r.deltas.begin(), r.deltas.end());
  r.mean_delta = std::accumulate(r.deltas.begin(), r.deltas.end(), 0.0) / r.deltas.size();
  r.smooth = r.max_delta <= 3 * r.mean_delta;
  return r;
}

}  // namespace latentlens
