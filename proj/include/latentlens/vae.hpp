#pragma once

#include <string>
#include <vector>

#include "latentlens/adam.hpp"
#include "latentlens/generator.hpp"
#include "latentlens/layers.hpp"

namespace latentlens {

struct VaeArch {
  int latent_dim = 32;
  int image_size = 32;   // square, power of two, >= 16
  int channels = 16;     // stem width; doubles per stage up to 4x
  int feature_dim = 64;  // penultimate encoder layer (Fréchet features)
};

/// Two 3x3 conv + batchnorm layers with a 1x1 skip; `down` halves the
/// resolution with stride 2, `up` doubles it with nearest upsampling first.
class ResBlock {
 public:
  enum class Kind { down, up };
  ResBlock() = default;
  ResBlock(Kind kind, int in, int out, Rng& rng);
  Tensor operator()(const Tensor& x, bool training) const;
  void visit(const std::string& prefix, const nn::StateVisitor& f);

 private:
  Kind kind_ = Kind::down;
  nn::Conv2d conv1_, conv2_, skip_;
  nn::BatchNorm2d bn1_, bn2_;
};

struct Posterior {
  Tensor mu, logvar;
};

class Encoder {
 public:
  Encoder(const VaeArch& arch, Rng& rng);

  /// Penultimate layer, [B, feature_dim].
  Tensor features(const Tensor& x, bool training) const;
  Posterior encode(const Tensor& x, bool training) const;

  const VaeArch& arch() const { return arch_; }
  void visit(const std::string& prefix, const nn::StateVisitor& f);

 private:
  VaeArch arch_;
  nn::Conv2d stem_;
  nn::BatchNorm2d stem_bn_;
  std::vector<ResBlock> blocks_;
  nn::Linear fc_, mu_, logvar_;
};

class Decoder final : public LatentGenerator {
 public:
  Decoder(const VaeArch& arch, Rng& rng);

  Tensor decode(const Tensor& z, bool training) const;

  int latent_dim() const override { return arch_.latent_dim; }
  int image_height() const override { return arch_.image_size; }
  int image_width() const override { return arch_.image_size; }
  Tensor generate(const Tensor& z) const override { return decode(z, false); }
  std::string checksum() const override;
  void set_frozen(bool frozen) override { nn::set_trainable(*this, !frozen); }

  const VaeArch& arch() const { return arch_; }
  void visit(const std::string& prefix, const nn::StateVisitor& f);

 private:
  VaeArch arch_;
  int top_channels_;
  nn::Linear fc_;
  nn::BatchNorm2d fc_bn_;
  std::vector<ResBlock> blocks_;
  nn::Conv2d head_;
};

/// z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from rng.
Tensor reparameterize(const Posterior& q, Rng& rng);

struct VaeLoss {
  Tensor total, recon, kld;
};

/// total = log_mse(x_hat, x) + beta * kld(mu, logvar).
VaeLoss vae_loss(const Tensor& x, const Tensor& x_hat, const Posterior& q, double beta);

struct VaeTrainConfig {
  double beta = 0.01;
  double lr = 1e-4;
  int batch = 64;
  int epochs = 15;
};

struct VaeStepLosses {
  double total = 0, recon = 0, kld = 0;
};

class VaeTrainer {
 public:
  VaeTrainer(Encoder& enc, Decoder& dec, const VaeTrainConfig& config, Rng rng);
  VaeStepLosses step(const Tensor& x, std::int64_t step);

 private:
  Encoder& enc_;
  Decoder& dec_;
  VaeTrainConfig config_;
  Rng rng_;
  Adam<float> opt_;
};

}  // namespace latentlens
