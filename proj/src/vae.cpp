#include "latentlens/vae.hpp"

#include <bit>
#include <cmath>

#include "latentlens/losses.hpp"

namespace latentlens {

namespace {

int stage_count(const VaeArch& arch) {
  const int s = arch.image_size;
  if (s < 16 || !std::has_single_bit(static_cast<unsigned>(s))) {
    throw Error(ErrorCategory::config, "vae: image size must be a power of two >= 16, got " + std::to_string(s));
  }
  if (arch.latent_dim < 1 || arch.channels < 1 || arch.feature_dim < 1) {
    throw Error(ErrorCategory::config, "vae: latent dim, channels and feature dim must be positive");
  }
  return std::countr_zero(static_cast<unsigned>(s)) - 2;
}

// Channels after encoder stage i (stage -1 is the stem).
int stage_channels(const VaeArch& arch, int i) { return arch.channels * std::min(4, 1 << (i + 1)); }

std::vector<NamedParam<float>> joint_parameters(Encoder& enc, Decoder& dec) {
  auto params = nn::parameters(enc);
  for (auto& p : params) p.name = "encoder." + p.name;
  for (auto& p : nn::parameters(dec)) params.push_back({"decoder." + p.name, p.tensor});
  return params;
}

}  // namespace

ResBlock::ResBlock(Kind kind, int in, int out, Rng& rng) : kind_(kind) {
  const ConvGeometry first{kind == Kind::down ? 2 : 1, 1};
  conv1_ = nn::Conv2d(in, out, 3, first, nn::Init::he, rng);
  bn1_ = nn::BatchNorm2d(out, nn::Init::he, rng);
  conv2_ = nn::Conv2d(out, out, 3, {1, 1}, nn::Init::he, rng);
  bn2_ = nn::BatchNorm2d(out, nn::Init::he, rng);
  skip_ = nn::Conv2d(in, out, 1, {kind == Kind::down ? 2 : 1, 0}, nn::Init::he, rng);
}

Tensor ResBlock::operator()(const Tensor& x, bool training) const {
  const Tensor in = kind_ == Kind::up ? upsample_nearest(x, 2) : x;
  Tensor h = relu(bn1_(conv1_(in), training));
  h = bn2_(conv2_(h), training);
  return relu(add(h, skip_(in)));
}

void ResBlock::visit(const std::string& prefix, const nn::StateVisitor& f) {
  conv1_.visit(prefix + "conv1.", f);
  bn1_.visit(prefix + "bn1.", f);
  conv2_.visit(prefix + "conv2.", f);
  bn2_.visit(prefix + "bn2.", f);
  skip_.visit(prefix + "skip.", f);
}

Encoder::Encoder(const VaeArch& arch, Rng& rng) : arch_(arch) {
  const int stages = stage_count(arch);
  stem_ = nn::Conv2d(1, arch.channels, 3, {1, 1}, nn::Init::he, rng);
  stem_bn_ = nn::BatchNorm2d(arch.channels, nn::Init::he, rng);
  int in = arch.channels;
  for (int i = 0; i < stages; ++i) {
    const int out = stage_channels(arch, i);
    blocks_.emplace_back(ResBlock::Kind::down, in, out, rng);
    in = out;
  }
  fc_ = nn::Linear(in * 16, arch.feature_dim, nn::Init::he, rng);
  mu_ = nn::Linear(arch.feature_dim, arch.latent_dim, nn::Init::he, rng);
  logvar_ = nn::Linear(arch.feature_dim, arch.latent_dim, nn::Init::he, rng);
  // Start near the prior so early KLD does not dominate.
  for (auto& w : logvar_.weight.mutable_data()) w *= 0.1f;
}

Tensor Encoder::features(const Tensor& x, bool training) const {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != arch_.image_size || x.dim(3) != arch_.image_size) {
    throw Error(ErrorCategory::shape, "encoder: expected [B, 1, " + std::to_string(arch_.image_size) + ", " +
                                          std::to_string(arch_.image_size) + "], got " + shape_str(x.shape()));
  }
  Tensor h = relu(stem_bn_(stem_(x), training));
  for (const auto& block : blocks_) h = block(h, training);
  const std::int64_t flat = h.numel() / x.dim(0);
  return leaky_relu(fc_(reshape(h, {x.dim(0), flat})));
}

Posterior Encoder::encode(const Tensor& x, bool training) const {
  const Tensor f = features(x, training);
  return {mu_(f), logvar_(f)};
}

void Encoder::visit(const std::string& prefix, const nn::StateVisitor& f) {
  stem_.visit(prefix + "stem.", f);
  stem_bn_.visit(prefix + "stem_bn.", f);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(prefix + "block" + std::to_string(i) + ".", f);
  fc_.visit(prefix + "fc.", f);
  mu_.visit(prefix + "mu.", f);
  logvar_.visit(prefix + "logvar.", f);
}

Decoder::Decoder(const VaeArch& arch, Rng& rng) : arch_(arch) {
  const int stages = stage_count(arch);
  top_channels_ = stage_channels(arch, stages - 1);
  fc_ = nn::Linear(arch.latent_dim, top_channels_ * 16, nn::Init::he, rng);
  fc_bn_ = nn::BatchNorm2d(top_channels_, nn::Init::he, rng);
  int in = top_channels_;
  for (int i = stages - 2; i >= -1; --i) {
    const int out = i >= 0 ? stage_channels(arch, i) : arch.channels;
    blocks_.emplace_back(ResBlock::Kind::up, in, out, rng);
    in = out;
  }
  head_ = nn::Conv2d(in, 1, 3, {1, 1}, nn::Init::he, rng);
}

Tensor Decoder::decode(const Tensor& z, bool training) const {
  check_latent(*this, z, "decoder");
  Tensor h = reshape(fc_(z), {z.dim(0), top_channels_, 4, 4});
  h = relu(fc_bn_(h, training));
  for (const auto& block : blocks_) h = block(h, training);
  return tanh(head_(h));
}

std::string Decoder::checksum() const { return nn::checksum(const_cast<Decoder&>(*this)); }

void Decoder::visit(const std::string& prefix, const nn::StateVisitor& f) {
  fc_.visit(prefix + "fc.", f);
  fc_bn_.visit(prefix + "fc_bn.", f);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit(prefix + "block" + std::to_string(i) + ".", f);
  head_.visit(prefix + "head.", f);
}

Tensor reparameterize(const Posterior& q, Rng& rng) {
  if (q.mu.shape() != q.logvar.shape()) {
    throw Error(ErrorCategory::shape, "reparameterize: mu " + shape_str(q.mu.shape()) + " vs logvar " +
                                          shape_str(q.logvar.shape()));
  }
  const Tensor eps = Tensor::randn(q.mu.shape(), rng);
  return add(q.mu, mul(exp(scale(q.logvar, 0.5f)), eps));
}

VaeLoss vae_loss(const Tensor& x, const Tensor& x_hat, const Posterior& q, double beta) {
  if (x.shape() != x_hat.shape()) {
    throw Error(ErrorCategory::shape, "vae_loss: input " + shape_str(x.shape()) + " vs reconstruction " +
                                          shape_str(x_hat.shape()));
  }
  VaeLoss l;
  l.recon = log_mse(x_hat, x);
  l.kld = kld_diag_gaussian(q.mu, q.logvar);
  l.total = add(l.recon, scale(l.kld, static_cast<float>(beta)));
  return l;
}

VaeTrainer::VaeTrainer(Encoder& enc, Decoder& dec, const VaeTrainConfig& config, Rng rng)
    : enc_(enc), dec_(dec), config_(config), rng_(rng), opt_(joint_parameters(enc, dec), {.lr = config.lr}) {
  if (!(config.beta > 0)) throw Error(ErrorCategory::config, "vae: beta must be positive");
}

VaeStepLosses VaeTrainer::step(const Tensor& x, std::int64_t step) {
  const Posterior q = enc_.encode(x, true);
  const Tensor z = reparameterize(q, rng_);
  const VaeLoss l = vae_loss(x, dec_.decode(z, true), q, config_.beta);
  const double total = l.total.item();
  if (!std::isfinite(total)) {
    throw Error(ErrorCategory::numeric, "vae: non-finite loss at step " + std::to_string(step));
  }
  backward(l.total);
  opt_.step();
  return {total, l.recon.item(), l.kld.item()};
}

}  // namespace latentlens
