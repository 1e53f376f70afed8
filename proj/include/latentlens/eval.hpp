#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "latentlens/generator.hpp"
#include "latentlens/phantom.hpp"
#include "latentlens/rng.hpp"

namespace latentlens {

// ---------------------------------------------------------------------------
// Fréchet feature distance

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased
  std::size_t count = 0;
};

/// Mean and unbiased covariance of the rows of an [N, m] feature matrix.
FeatureStats feature_stats(const Eigen::MatrixXd& features);
FeatureStats feature_stats(const Tensor& features);

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^1/2). The square root is taken
/// as Sa^1/2 Sb Sa^1/2, symmetrized, with negative eigenvalues clamped.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// ---------------------------------------------------------------------------
// Moment-based factor extraction

/// Normalized-intensity thresholds: body (about -550 HU) and lung (-400 HU).
inline constexpr float kBodyThreshold = -0.7f;
inline constexpr float kLungThreshold = -0.6f;
/// Soft-tissue boundary (about -30 HU) below which body pixels count as fat.
inline constexpr float kFatThreshold = -0.353f;

struct FactorEstimate {
  double width = 0;      // body extent along its own axis, fraction of image width
  double height = 0;     // fraction of image height
  double rotation = 0;   // degrees, (-90, 90]
  double y_offset = 0;   // centroid row offset, fraction of image height
  double lung_area = 0;  // fraction of body pixels below the lung threshold
  double intensity = 0;  // mean normalized intensity inside the body
  double size = 0;       // body area, fraction of the image
  double thickness = 0;  // fraction of body pixels in the fat band
};

inline constexpr std::size_t kEstimateCount = 8;
inline constexpr std::array<std::string_view, kEstimateCount> kEstimateNames = {
    "width", "height", "rotation", "y_offset", "lung_area", "intensity", "size", "thickness"};
/// Factors with well-posed moment proxies.
inline constexpr std::array<std::string_view, 5> kWellPosedFactors = {"width", "height", "rotation", "y_offset",
                                                                      "lung_area"};

std::array<double, kEstimateCount> to_array(const FactorEstimate& e);

/// Throws a data error "no body detected" for an empty mask.
FactorEstimate extract_factors(const NormalizedImage& img);
FactorEstimate extract_factors(std::span<const float> pixels, int height, int width);

// ---------------------------------------------------------------------------
// Rank correlation

/// Ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Spearman's rho as the Pearson correlation of average ranks. Returns 0 when
/// either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Direction <-> factor correlation

struct CorrelationRow {
  std::array<double, kEstimateCount> mean_abs_rho{};  // mean over z of |rho|
  std::array<double, kEstimateCount> mean_rho{};      // mean over z of signed rho
  int best_factor = -1;                               // index into kEstimateNames
  double best_abs_rho = 0;
  double failure_rate = 0;
  bool unstable = false;
};

/// Sweeps alpha along `direction` (length d) for n_z fresh latents, extracts
/// factors from every frame and averages the per-latent Spearman rho.
/// Directions whose frames fail extraction more than 20% of the time are
/// flagged unstable and get no best factor.
CorrelationRow direction_factor_correlation(const LatentGenerator& g, std::span<const float> direction, int n_z,
                                            std::span<const double> alpha_grid, Rng& rng);

/// Evenly spaced grid over [lo, hi].
std::vector<double> linspace(double lo, double hi, int n);

// ---------------------------------------------------------------------------
// Memorization checks

struct LatentSearchResult {
  std::vector<float> z;
  double residual = 0;  // mse of G(z) against the target
};

/// Adam on z from 0 minimizing mse(G(z), target); returns the best z seen.
LatentSearchResult reverse_latent_search(const LatentGenerator& g, std::span<const float> target, int steps,
                                         double lr);

struct InterpolationReport {
  std::vector<double> deltas;  // L2 image distance between consecutive frames
  double max_delta = 0, mean_delta = 0;
  bool smooth = true;  // max <= 3 * mean
};

InterpolationReport interpolation_check(const LatentGenerator& g, std::span<const float> z_a,
                                        std::span<const float> z_b, int n_frames);

}  // namespace latentlens
