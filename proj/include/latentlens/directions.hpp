#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "latentlens/adam.hpp"
#include "latentlens/generator.hpp"
#include "latentlens/layers.hpp"
#include "latentlens/vae.hpp"

namespace latentlens {

enum class ColumnMode { unit, orthonormal };
enum class Backbone { lenet, resnet };

std::string to_string(ColumnMode mode);
std::string to_string(Backbone backbone);
ColumnMode parse_column_mode(const std::string& s);
Backbone parse_backbone(const std::string& s);

/// Normalizes the columns of a [d, K] matrix in place: unit length, or the
/// Q factor of a QR decomposition with a nonnegative R diagonal.
void project_columns(Tensor& a, ColumnMode mode);

/// Learned shift directions A in R^{d x K}.
class DirectionMatrix {
 public:
  DirectionMatrix() = default;
  DirectionMatrix(int latent_dim, int k, ColumnMode mode, Rng& rng);
  DirectionMatrix(Tensor a, ColumnMode mode);

  int latent_dim() const { return static_cast<int>(a_.dim(0)); }
  int k() const { return static_cast<int>(a_.dim(1)); }
  ColumnMode mode() const { return mode_; }
  const Tensor& matrix() const { return a_; }
  Tensor& matrix() { return a_; }

  /// z + A c for coefficients c [B, K]; records gradients into A.
  Tensor shift(const Tensor& z, const Tensor& coeffs) const;
  /// z + A (alpha_i e_{k_i}) per row.
  Tensor shift(const Tensor& z, std::span<const int> k, std::span<const float> alpha) const;

  void project() { project_columns(a_, mode_); }
  /// Largest deviation from the column constraint: |norm - 1| (unit) or
  /// max |A^T A - I| (orthonormal).
  double constraint_error() const;

  /// Unit column k as a d-vector.
  std::vector<float> column(int k) const;

 private:
  Tensor a_;
  ColumnMode mode_ = ColumnMode::unit;
};

struct ReconstructorArch {
  Backbone backbone = Backbone::lenet;
  int k = 32;
  int image_size = 32;
  int width = 16;  // lenet: first conv width; resnet: stem width
};

struct ReconstructorOutput {
  Tensor logits;  // [B, K]
  Tensor alpha;   // [B, 1]
};

/// Predicts (k, alpha) from the channel-wise concatenated pair (original, shifted).
class Reconstructor {
 public:
  Reconstructor(const ReconstructorArch& arch, Rng& rng);

  ReconstructorOutput operator()(const Tensor& original, const Tensor& shifted, bool training) const;

  const ReconstructorArch& arch() const { return arch_; }
  void visit(const std::string& prefix, const nn::StateVisitor& f);

 private:
  Tensor trunk(const Tensor& x, bool training) const;

  ReconstructorArch arch_;
  // lenet
  nn::Conv2d conv1_, conv2_;
  nn::Linear fc_;
  // resnet
  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  std::vector<ResBlock> blocks_;
  int features_ = 0;
  nn::Linear k_head_, alpha_head_;
};

struct DirectionTrainConfig {
  double gamma = 0.25;
  double alpha_max = 6.0, alpha_min = 0.5;
  int batch = 32;
  int iters = 6000;
  double lr = 1e-3;
  int log_every = 100;
  std::optional<float> force_alpha;  // test hook: every sampled alpha takes this value
  bool check_constraints = false;    // verify the column constraint after every step
};

/// One (z, k, alpha) batch with its rendered pair.
struct ShiftBatch {
  Tensor z;  // [B, d]
  std::vector<int> k;
  std::vector<float> alpha;
  Tensor original, shifted;  // [B, 1, H, W]
};

/// Draws k uniformly and alpha uniformly from [-alpha_max, alpha_max],
/// redrawing while |alpha| < alpha_min.
void sample_shift_params(Rng& rng, int batch, int k, const DirectionTrainConfig& config, std::vector<int>& ks,
                         std::vector<float>& alphas);

/// Samples a batch and renders both images with gradient flowing into A only
/// through the shifted image.
ShiftBatch sample_shift(const DirectionMatrix& a, const LatentGenerator& g, Rng& rng, int batch,
                        const DirectionTrainConfig& config);

struct DirectionLosses {
  double l_cl = 0, l_s = 0, accuracy = 0;
};

struct MetricsRow {
  std::int64_t iter = 0;
  double l_cl = 0, l_s = 0, rca = 0;
};

/// Joint optimization of A and R with L_cl + gamma * L_s; G stays frozen.
class DirectionTrainer {
 public:
  // Freezes g for the lifetime of the trainer.
  DirectionTrainer(DirectionMatrix& a, Reconstructor& r, LatentGenerator& g, const DirectionTrainConfig& config,
                   Rng rng);

  ~DirectionTrainer();
  DirectionTrainer(const DirectionTrainer&) = delete;
  DirectionTrainer& operator=(const DirectionTrainer&) = delete;

  DirectionLosses step();
  std::int64_t iteration() const { return iter_; }

  /// Runs config.iters steps. Every log_every steps a row with the interval
  /// means is appended; rca there is the accuracy on the fresh training
  /// batches of the interval, measured before each update.
  std::vector<MetricsRow> run(const std::function<void(std::int64_t, const DirectionMatrix&)>& on_step = {},
                              const std::function<void(const MetricsRow&)>& on_row = {});

 private:
  DirectionMatrix& a_;
  Reconstructor& r_;
  LatentGenerator& g_;
  DirectionTrainConfig config_;
  Rng rng_;
  Adam<float> opt_;
  std::int64_t iter_ = 0;
};

struct RcaReport {
  double rca = 0, l_s = 0, l_cl = 0;
  std::int64_t samples = 0;
};

/// Accuracy of argmax k-hat and mean |alpha - alpha-hat| on fresh samples.
RcaReport rca_eval(const DirectionMatrix& a, const Reconstructor& r, const LatentGenerator& g, std::int64_t n_samples,
                   Rng rng, const DirectionTrainConfig& config = {}, int batch = 250);

/// Same as rca_eval but with an arbitrary predictor of k from a batch; used
/// for oracle and chance baselines.
using KPredictor = std::function<std::vector<int>(const ShiftBatch&)>;
double rca_with(const DirectionMatrix& a, const LatentGenerator& g, const KPredictor& predict, std::int64_t n_samples,
                Rng rng, const DirectionTrainConfig& config = {}, int batch = 250);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

/// LLCK with "A" plus "reconstructor.*" entries and a JSON sidecar
/// {mode, K, d, backbone, width, generator_checksum}.
void save_directions(const std::filesystem::path& path, const DirectionMatrix& a, Reconstructor& r,
                     const std::string& generator_checksum);

struct DirectionsSidecar {
  ColumnMode mode = ColumnMode::unit;
  int k = 0, d = 0;
  Backbone backbone = Backbone::lenet;
  int width = 0;
  int image_size = 0;
  std::string generator_checksum;
};

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);
DirectionsSidecar read_sidecar(const std::filesystem::path& checkpoint);
DirectionMatrix load_direction_matrix(const std::filesystem::path& path);

}  // namespace latentlens
