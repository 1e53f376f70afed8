#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentlens/adam.hpp"
#include "latentlens/generator.hpp"
#include "latentlens/layers.hpp"

namespace latentlens {

struct GanArch {
  int latent_dim = 32;
  int image_size = 32;  // square, power of two, >= 16
  int channels = 256;   // width of the 4x4 stage; halves per upsampling stage
};

/// DCGAN generator: linear to [C, 4, 4], then stride-2 transposed convs with
/// batchnorm + relu, ending in a single-channel tanh image.
class Generator final : public LatentGenerator {
 public:
  Generator(const GanArch& arch, Rng& rng);

  Tensor forward(const Tensor& z, bool training) const;

  int latent_dim() const override { return arch_.latent_dim; }
  int image_height() const override { return arch_.image_size; }
  int image_width() const override { return arch_.image_size; }
  Tensor generate(const Tensor& z) const override { return forward(z, false); }
  std::string checksum() const override;
  void set_frozen(bool frozen) override { nn::set_trainable(*this, !frozen); }

  const GanArch& arch() const { return arch_; }
  void visit(const std::string& prefix, const nn::StateVisitor& f);

 private:
  GanArch arch_;
  nn::Linear fc_;
  nn::BatchNorm2d fc_bn_;
  std::vector<nn::ConvTranspose2d> ups_;
  std::vector<nn::BatchNorm2d> bns_;
};

/// Stride-2 convs with leaky relu (0.2) down to [C, 4, 4]; the flattened
/// 4x4 map is the penultimate feature layer, followed by one logit.
class Discriminator {
 public:
  Discriminator(const GanArch& arch, Rng& rng);

  Tensor features(const Tensor& x) const;
  Tensor forward(const Tensor& x) const;  // [B, 1] logits

  void visit(const std::string& prefix, const nn::StateVisitor& f);

 private:
  GanArch arch_;
  std::vector<nn::Conv2d> downs_;
  nn::Linear head_;
};

struct GanTrainConfig {
  double lr = 2e-4;
  double beta1 = 0.5, beta2 = 0.999;
  int batch = 64;
  int epochs = 25;
  double sigma0 = 0.1;           // instance-noise std at step 0
  bool label_smoothing = true;   // real targets drawn from [0.9, 1]
  double smooth_lo = 0.9, smooth_hi = 1.0;
};

/// sigma0 * max(0, 1 - 2 t / T): linear anneal reaching 0 at mid-training.
double instance_noise_sigma(double sigma0, std::int64_t step, std::int64_t total_steps);

struct GanLosses {
  double d_loss = 0, g_loss = 0, sigma = 0;
};

/// One discriminator step followed by one generator step per call.
class GanTrainer {
 public:
  GanTrainer(Generator& g, Discriminator& d, const GanTrainConfig& config, Rng rng);

  /// `real` is [B, 1, H, W] in [-1, 1]. Throws a numeric error naming the
  /// step when a loss is not finite.
  GanLosses step(const Tensor& real, std::int64_t step, std::int64_t total_steps);

 private:
  Tensor noisy(const Tensor& x, double sigma);

  Generator& g_;
  Discriminator& d_;
  GanTrainConfig config_;
  Rng rng_;
  Adam<float> g_opt_, d_opt_;
};

}  // namespace latentlens
