#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "latentlens/checkpoint.hpp"
#include "latentlens/dataset.hpp"
#include "latentlens/gan.hpp"
#include "latentlens/losses.hpp"
#include "latentlens/pipeline.hpp"
#include "latentlens/vae.hpp"

using namespace latentlens;

namespace {

constexpr GanArch kTinyGan{8, 16, 16};
constexpr VaeArch kTinyVae{8, 16, 4, 16};

Tensor real_batch(int n, int size, std::uint64_t seed) {
  static const Dataset ds = generate_dataset(64, 16, 16, 123);
  if (size != 16) throw std::logic_error("fixture is 16x16");
  std::vector<std::size_t> idx;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) idx.push_back(rng.below(ds.count()));
  return ds.batch(idx);
}

// Scalar reference for log_mse + beta * kld in double precision.
double loss_oracle(const Tensor& x, const Tensor& x_hat, const Tensor& mu, const Tensor& logvar, double beta) {
  double se = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) se += std::pow(static_cast<double>(x_hat[i]) - x[i], 2);
  const double recon = std::log(se / x.numel() + 1e-8) - std::log(1e-8);
  double kld = 0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    kld += 0.5 * (std::pow(static_cast<double>(mu[i]), 2) + std::exp(static_cast<double>(logvar[i])) - 1 - logvar[i]);
  }
  return recon + beta * kld / mu.dim(0);
}

double pair_loss(const Discriminator& d, const Tensor& real, const Tensor& fake) {
  NoGradGuard guard;
  return bce_with_logits(d.forward(real), 1.0f).item() + bce_with_logits(d.forward(fake), 0.0f).item();
}

}  // namespace

TEST(InstanceNoise, AnnealsToZeroAtMidpoint) {
  EXPECT_DOUBLE_EQ(instance_noise_sigma(0.1, 0, 1000), 0.1);
  EXPECT_NEAR(instance_noise_sigma(0.1, 250, 1000), 0.05, 1e-15);
  EXPECT_DOUBLE_EQ(instance_noise_sigma(0.1, 500, 1000), 0.0);
  EXPECT_DOUBLE_EQ(instance_noise_sigma(0.1, 750, 1000), 0.0);
  EXPECT_DOUBLE_EQ(instance_noise_sigma(0.1, 3, 0), 0.0);
}

TEST(Gan, ShapesAndBoundedOutput) {
  Rng rng(1);
  Generator g(kTinyGan, rng);
  Discriminator d(kTinyGan, rng);
  const Tensor z = Tensor::randn({5, 8}, rng, 10.0);
  const Tensor img = g.generate(z);
  EXPECT_EQ(img.shape(), (Shape{5, 1, 16, 16}));
  for (float v : img.data()) {
    EXPECT_GT(v, -1.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_EQ(d.forward(img).shape(), (Shape{5, 1}));
  EXPECT_EQ(d.features(img).shape(), (Shape{5, 16 * 16}));
  EXPECT_THROW(g.generate(Tensor::zeros({5, 7})), Error);
  EXPECT_THROW(d.forward(Tensor::zeros({2, 1, 8, 8})), Error);
  EXPECT_THROW(Generator(GanArch{8, 24, 16}, rng), Error);
}

TEST(Gan, UntrainedDiscriminatorLossNearTwoLn2) {
  Rng rng(2);
  Generator g(kTinyGan, rng);
  Discriminator d(kTinyGan, rng);
  GanTrainer t(g, d, {}, Rng(3));
  const GanLosses l = t.step(real_batch(32, 16, 1), 0, 100);
  EXPECT_NEAR(l.d_loss, 2 * std::numbers::ln2, 0.5);
  EXPECT_DOUBLE_EQ(l.sigma, 0.1);
}

TEST(Gan, SeededTrainingIsReproducible) {
  auto run = [] {
    Rng rng(4);
    Generator g(kTinyGan, rng);
    Discriminator d(kTinyGan, rng);
    GanTrainer t(g, d, {}, Rng(5));
    std::vector<double> losses;
    for (int s = 0; s < 3; ++s) {
      const GanLosses l = t.step(real_batch(16, 16, s), s, 10);
      losses.push_back(l.d_loss);
      losses.push_back(l.g_loss);
    }
    return std::pair{losses, g.checksum() + nn::checksum(d)};
  };
  EXPECT_EQ(run(), run());
}

TEST(Gan, OneDiscriminatorStepLowersPairLoss) {
  Rng rng(6);
  Generator g(kTinyGan, rng);
  Discriminator d(kTinyGan, rng);
  const Tensor real = real_batch(1, 16, 7);
  const Tensor fake = g.generate(Tensor::randn({1, 8}, rng));
  const double before = pair_loss(d, real, fake);
  Adam<float> opt(nn::parameters(d), {.lr = 2e-4, .beta1 = 0.5});
  backward(add(bce_with_logits(d.forward(real), 1.0f), bce_with_logits(d.forward(fake), 0.0f)));
  opt.step();
  EXPECT_LT(pair_loss(d, real, fake), before);
}

TEST(Gan, DiscriminatorIsFrozenDuringGeneratorUpdate) {
  Rng rng(8);
  Generator g(kTinyGan, rng);
  Discriminator d(kTinyGan, rng);
  GanTrainer t(g, d, {}, Rng(9));
  t.step(real_batch(8, 16, 2), 0, 10);
  for (const auto& p : nn::parameters(d)) {
    EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
    EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  }
}

TEST(Gan, NonFiniteLossNamesStep) {
  Rng rng(10);
  Generator g(kTinyGan, rng);
  Discriminator d(kTinyGan, rng);
  nn::parameters(d).back().tensor.mutable_data()[0] = std::nanf("");
  GanTrainer t(g, d, {}, Rng(11));
  try {
    t.step(real_batch(4, 16, 3), 7, 10);
    FAIL() << "expected a numeric error";
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::numeric);
    EXPECT_NE(std::string(e.what()).find("at step 7"), std::string::npos) << e.what();
  }
}

TEST(Gan, CheckpointRoundTripReproducesSamples) {
  Rng rng(12);
  Generator g(kTinyGan, rng);
  Discriminator d(kTinyGan, rng);
  GanTrainer t(g, d, {}, Rng(13));
  t.step(real_batch(8, 16, 4), 0, 10);
  ModelCheckpoint ckpt;
  ckpt.merge(nn::state(g), "generator.");
  const auto loaded = load_model(decode_checkpoint(encode_checkpoint(ckpt)));
  ASSERT_EQ(loaded.kind, ModelKind::gan);
  const Tensor z = Tensor::randn({4, 8}, rng);
  EXPECT_EQ(g.generate(z).vec(), loaded.generator->generate(z).vec());
  EXPECT_EQ(g.checksum(), loaded.generator->checksum());
}

TEST(Reparameterize, VanishingVarianceReturnsMean) {
  Rng rng(14);
  const Tensor mu = Tensor::randn({4, 8}, rng);
  const Posterior q{mu, Tensor::full({4, 8}, -30.0f)};
  const Tensor z = reparameterize(q, rng);
  for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(z[i], mu[i], 1e-6);
}

TEST(Reparameterize, SeedFixesNoise) {
  Rng r0(15);
  const Posterior q{Tensor::randn({3, 8}, r0), Tensor::randn({3, 8}, r0)};
  Rng a(16), b(16);
  EXPECT_EQ(reparameterize(q, a).vec(), reparameterize(q, b).vec());
}

TEST(Reparameterize, MonteCarloMeanMatchesMu) {
  constexpr int n = 10000;
  const double sigma = 2.0;
  Rng rng(17);
  const Posterior q{Tensor::full({n, 1}, 0.7f), Tensor::full({n, 1}, static_cast<float>(std::log(sigma * sigma)))};
  const Tensor z = reparameterize(q, rng);
  double mean = 0;
  for (float v : z.data()) mean += v / n;
  EXPECT_NEAR(mean, 0.7, 3 * sigma / std::sqrt(n));
}

TEST(VaeLoss, PerfectReconstructionAtPriorIsZero) {
  Rng rng(18);
  const Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, -1, 1);
  const VaeLoss l = vae_loss(x, x, {Tensor::zeros({2, 8}), Tensor::zeros({2, 8})}, 0.01);
  EXPECT_EQ(l.total.item(), 0.0f);
  EXPECT_EQ(l.recon.item(), 0.0f);
  EXPECT_EQ(l.kld.item(), 0.0f);
}

TEST(VaeLoss, ZeroBetaIgnoresPosterior) {
  Rng rng(19);
  const Tensor x = Tensor::uniform({2, 1, 16, 16}, rng, -1, 1);
  const Tensor x_hat = Tensor::uniform({2, 1, 16, 16}, rng, -1, 1);
  const float a = vae_loss(x, x_hat, {Tensor::zeros({2, 8}), Tensor::zeros({2, 8})}, 0.0).total.item();
  const float b = vae_loss(x, x_hat, {Tensor::randn({2, 8}, rng, 3), Tensor::randn({2, 8}, rng, 2)}, 0.0).total.item();
  EXPECT_EQ(a, b);
}

TEST(VaeLoss, MatchesScalarOracle) {
  Rng rng(20);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = Tensor::uniform({3, 1, 16, 16}, rng, -1, 1);
    const Tensor x_hat = Tensor::uniform({3, 1, 16, 16}, rng, -1, 1);
    const Tensor mu = Tensor::randn({3, 8}, rng);
    const Tensor lv = Tensor::randn({3, 8}, rng, 0.5);
    const double got = vae_loss(x, x_hat, {mu, lv}, 0.01).total.item();
    const double want = loss_oracle(x, x_hat, mu, lv, 0.01);
    EXPECT_NEAR(got, want, 1e-6 * std::abs(want));
  }
  EXPECT_THROW(vae_loss(Tensor::zeros({1, 1, 16, 16}), Tensor::zeros({1, 1, 8, 8}),
                        {Tensor::zeros({1, 8}), Tensor::zeros({1, 8})}, 0.01),
               Error);
}

TEST(Vae, ShapesBoundsAndConfig) {
  Rng rng(21);
  Encoder enc(kTinyVae, rng);
  Decoder dec(kTinyVae, rng);
  const Tensor x = real_batch(3, 16, 5);
  const Posterior q = enc.encode(x, false);
  EXPECT_EQ(q.mu.shape(), (Shape{3, 8}));
  EXPECT_EQ(q.logvar.shape(), (Shape{3, 8}));
  EXPECT_EQ(enc.features(x, false).shape(), (Shape{3, 16}));
  const Tensor y = dec.generate(Tensor::randn({3, 8}, rng, 10));
  EXPECT_EQ(y.shape(), (Shape{3, 1, 16, 16}));
  for (float v : y.data()) {
    EXPECT_GT(v, -1.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_THROW(dec.generate(Tensor::zeros({3, 9})), Error);
  EXPECT_THROW(enc.encode(Tensor::zeros({3, 1, 32, 32}), false), Error);
  VaeTrainConfig bad;
  bad.beta = 0;
  EXPECT_THROW(VaeTrainer(enc, dec, bad, Rng(1)), Error);
}

TEST(Vae, ShortTrainingImprovesReconstruction) {
  const Dataset ds = generate_dataset(256, 16, 16, 22);
  Rng rng(23);
  Encoder enc(kTinyVae, rng);
  Decoder dec(kTinyVae, rng);
  VaeTrainConfig config;
  config.lr = 1e-3;
  VaeTrainer t(enc, dec, config, Rng(24));

  std::vector<std::size_t> probe_idx(32);
  for (std::size_t i = 0; i < probe_idx.size(); ++i) probe_idx[i] = i;
  const Tensor probe = ds.batch(probe_idx);
  auto probe_recon = [&] {
    NoGradGuard guard;
    return log_mse(dec.decode(enc.encode(probe, false).mu, false), probe).item();
  };
  const double untrained = probe_recon();

  std::vector<double> epoch_recon;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < 2; ++epoch) {
    double sum = 0;
    for (std::size_t start = 0; start + 32 <= ds.count(); start += 32) {
      std::vector<std::size_t> idx(32);
      for (std::size_t i = 0; i < 32; ++i) idx[i] = start + i;
      sum += t.step(ds.batch(idx), step++).recon;
    }
    epoch_recon.push_back(sum);
  }
  EXPECT_LT(epoch_recon[1], epoch_recon[0]);
  EXPECT_LT(probe_recon(), untrained);

  NoGradGuard guard;
  const Posterior q = enc.encode(probe, false);
  for (int j = 0; j < 8; ++j) {
    double m = 0;
    for (int i = 0; i < 32; ++i) m += std::exp(q.logvar[i * 8 + j]) / 32;
    EXPECT_GT(m, 1e-4) << j;
    EXPECT_LT(m, 10) << j;
  }
}

TEST(Vae, CheckpointRoundTripIsExact) {
  Rng rng(25);
  Encoder enc(kTinyVae, rng);
  Decoder dec(kTinyVae, rng);
  ModelCheckpoint ckpt;
  ckpt.merge(nn::state(enc), "encoder.");
  ckpt.merge(nn::state(dec), "decoder.");
  const auto loaded = load_model(decode_checkpoint(encode_checkpoint(ckpt)));
  ASSERT_EQ(loaded.kind, ModelKind::vae);
  const VaeArch arch = infer_vae_arch(ckpt);
  EXPECT_EQ(arch.latent_dim, 8);
  EXPECT_EQ(arch.image_size, 16);
  EXPECT_EQ(arch.channels, 4);
  EXPECT_EQ(arch.feature_dim, 16);
  const Tensor z = Tensor::randn({4, 8}, rng);
  EXPECT_EQ(dec.generate(z).vec(), loaded.generator->generate(z).vec());
  const Tensor x = real_batch(4, 16, 6);
  EXPECT_EQ(enc.encode(x, false).mu.vec(), loaded.encoder->encode(x, false).mu.vec());
}

TEST(LoadModel, RejectsUnknownCheckpoint) {
  ModelCheckpoint ckpt;
  ckpt.add("something", Tensor::zeros({2}));
  try {
    load_model(ckpt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.category(), ErrorCategory::format);
  }
}
