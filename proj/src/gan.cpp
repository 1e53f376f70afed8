#include "latentlens/gan.hpp"

#include <bit>
#include <cmath>

#include "latentlens/losses.hpp"

namespace latentlens {

namespace {

int stage_count(const GanArch& arch) {
  const int s = arch.image_size;
  if (s < 16 || !std::has_single_bit(static_cast<unsigned>(s))) {
    throw Error(ErrorCategory::config, "gan: image size must be a power of two >= 16, got " + std::to_string(s));
  }
  const int stages = std::countr_zero(static_cast<unsigned>(s)) - 2;
  if (arch.channels >> (stages - 1) < 1) {
    throw Error(ErrorCategory::config, "gan: " + std::to_string(arch.channels) + " channels too narrow for " +
                                           std::to_string(stages) + " stages");
  }
  if (arch.latent_dim < 1) throw Error(ErrorCategory::config, "gan: latent dim must be positive");
  return stages;
}

constexpr ConvGeometry kStride2{2, 1};

}  // namespace

Generator::Generator(const GanArch& arch, Rng& rng) : arch_(arch) {
  const int stages = stage_count(arch);
  const int c = arch.channels;
  fc_ = nn::Linear(arch.latent_dim, c * 16, nn::Init::dcgan, rng);
  fc_bn_ = nn::BatchNorm2d(c, nn::Init::dcgan, rng);
  for (int i = 0; i < stages; ++i) {
    const int in = c >> i;
    const int out = i + 1 == stages ? 1 : c >> (i + 1);
    ups_.emplace_back(in, out, 4, kStride2, nn::Init::dcgan, rng);
    if (i + 1 < stages) bns_.emplace_back(out, nn::Init::dcgan, rng);
  }
}

Tensor Generator::forward(const Tensor& z, bool training) const {
  check_latent(*this, z, "generator");
  const std::int64_t b = z.dim(0);
  Tensor h = reshape(fc_(z), {b, arch_.channels, 4, 4});
  h = relu(fc_bn_(h, training));
  for (std::size_t i = 0; i < ups_.size(); ++i) {
    h = ups_[i](h);
    if (i < bns_.size()) h = relu(bns_[i](h, training));
  }
  return tanh(h);
}

std::string Generator::checksum() const { return nn::checksum(const_cast<Generator&>(*this)); }

void Generator::visit(const std::string& prefix, const nn::StateVisitor& f) {
  fc_.visit(prefix + "fc.", f);
  fc_bn_.visit(prefix + "fc_bn.", f);
  for (std::size_t i = 0; i < ups_.size(); ++i) ups_[i].visit(prefix + "up" + std::to_string(i) + ".", f);
  for (std::size_t i = 0; i < bns_.size(); ++i) bns_[i].visit(prefix + "bn" + std::to_string(i) + ".", f);
}

Discriminator::Discriminator(const GanArch& arch, Rng& rng) : arch_(arch) {
  const int stages = stage_count(arch);
  int in = 1;
  for (int i = 0; i < stages; ++i) {
    const int out = arch.channels >> (stages - 1 - i);
    downs_.emplace_back(in, out, 4, kStride2, nn::Init::dcgan, rng);
    in = out;
  }
  head_ = nn::Linear(arch.channels * 16, 1, nn::Init::dcgan, rng);
}

Tensor Discriminator::features(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != arch_.image_size || x.dim(3) != arch_.image_size) {
    throw Error(ErrorCategory::shape, "discriminator: expected [B, 1, " + std::to_string(arch_.image_size) + ", " +
                                          std::to_string(arch_.image_size) + "], got " + shape_str(x.shape()));
  }
  Tensor h = x;
  for (const auto& conv : downs_) h = leaky_relu(conv(h));
  return reshape(h, {x.dim(0), arch_.channels * 16});
}

Tensor Discriminator::forward(const Tensor& x) const { return head_(features(x)); }

void Discriminator::visit(const std::string& prefix, const nn::StateVisitor& f) {
  for (std::size_t i = 0; i < downs_.size(); ++i) downs_[i].visit(prefix + "down" + std::to_string(i) + ".", f);
  head_.visit(prefix + "head.", f);
}

double instance_noise_sigma(double sigma0, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return 0.0;
  return sigma0 * std::max(0.0, 1.0 - 2.0 * static_cast<double>(step) / static_cast<double>(total_steps));
}

GanTrainer::GanTrainer(Generator& g, Discriminator& d, const GanTrainConfig& config, Rng rng)
    : g_(g),
      d_(d),
      config_(config),
      rng_(rng),
      g_opt_(nn::parameters(g), {.lr = config.lr, .beta1 = config.beta1, .beta2 = config.beta2}),
      d_opt_(nn::parameters(d), {.lr = config.lr, .beta1 = config.beta1, .beta2 = config.beta2}) {}

Tensor GanTrainer::noisy(const Tensor& x, double sigma) {
  if (sigma <= 0) return x;
  return add(x, Tensor::randn(x.shape(), rng_, sigma));
}

GanLosses GanTrainer::step(const Tensor& real, std::int64_t step, std::int64_t total_steps) {
  const std::int64_t b = real.dim(0);
  const double sigma = instance_noise_sigma(config_.sigma0, step, total_steps);

  const Tensor z = Tensor::randn({b, g_.latent_dim()}, rng_);
  const Tensor fake = g_.forward(z, true);

  std::vector<float> real_targets(b, 1.0f);
  if (config_.label_smoothing) {
    for (auto& t : real_targets) t = static_cast<float>(rng_.uniform(config_.smooth_lo, config_.smooth_hi));
  }
  const Tensor d_loss = add(bce_with_logits(d_.forward(noisy(real, sigma)), std::span<const float>(real_targets)),
                            bce_with_logits(d_.forward(noisy(fake.detach(), sigma)), 0.0f));
  if (!std::isfinite(d_loss.item())) {
    throw Error(ErrorCategory::numeric, "gan: non-finite discriminator loss at step " + std::to_string(step));
  }
  backward(d_loss);
  d_opt_.step();

  nn::set_trainable(d_, false);
  const Tensor g_loss = bce_with_logits(d_.forward(noisy(fake, sigma)), 1.0f);
  if (!std::isfinite(g_loss.item())) {
    nn::set_trainable(d_, true);
    throw Error(ErrorCategory::numeric, "gan: non-finite generator loss at step " + std::to_string(step));
  }
  backward(g_loss);
  nn::set_trainable(d_, true);
  g_opt_.step();
  return {d_loss.item(), g_loss.item(), sigma};
}

}  // namespace latentlens
