#include "latentlens/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include "latentlens/binio.hpp"

namespace latentlens {

namespace {

constexpr int kFeatureBatch = 250;

std::vector<std::size_t> shuffled(std::span<const std::size_t> indices, Rng rng) {
  std::vector<std::size_t> out(indices.begin(), indices.end());
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void note(const TrainOptions& o, const std::string& msg) {
  if (o.log) o.log(msg);
}

bool keeps_snapshot(int epoch, int epochs) { return epoch == 1 || epoch > epochs - 5; }

int steps_per_epoch(const Split& split, int batch, const char* who) {
  if (batch < 2) throw Error(ErrorCategory::config, std::string(who) + ": batch must be at least 2");
  const int steps = static_cast<int>(split.train.size() / static_cast<std::size_t>(batch));
  if (steps < 1) {
    throw Error(ErrorCategory::config, std::string(who) + ": " + std::to_string(split.train.size()) +
                                           " training samples do not fill one batch of " + std::to_string(batch));
  }
  return steps;
}

void check_image_size(const Dataset& ds, int size, const char* who) {
  if (ds.height != size || ds.width != size) {
    throw Error(ErrorCategory::config, std::string(who) + ": dataset is " + std::to_string(ds.height) + "x" +
                                           std::to_string(ds.width) + " but the model expects " +
                                           std::to_string(size) + "x" + std::to_string(size));
  }
}

TrainOutcome select_epoch(std::vector<std::pair<int, ModelCheckpoint>>& snapshots,
                          const std::function<double(const ModelCheckpoint&)>& score, const TrainOptions& options,
                          const char* who) {
  TrainOutcome out;
  std::size_t best = 0;
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    const double fid = score(snapshots[i].second);
    out.fid.push_back({snapshots[i].first, fid});
    note(options, std::string(who) + " epoch " + std::to_string(snapshots[i].first) + " fid " + fmt(fid));
    if (snapshots[i].first == 1) out.epoch1_fid = fid;
    if (fid < out.fid[best].fid) best = i;
  }
  out.selected_epoch = snapshots[best].first;
  out.selected_fid = out.fid[best].fid;
  out.selected = std::move(snapshots[best].second);
  return out;
}

}  // namespace

FidScorer::FidScorer(const Encoder& extractor, const Dataset& ds, std::span<const std::size_t> test_indices)
    : extractor_(extractor) {
  if (test_indices.size() < 2) throw Error(ErrorCategory::data, "fid: need at least two reference images");
  Eigen::MatrixXd feats(static_cast<Eigen::Index>(test_indices.size()), extractor.arch().feature_dim);
  Eigen::Index row = 0;
  for (std::size_t start = 0; start < test_indices.size(); start += kFeatureBatch) {
    const std::size_t n = std::min<std::size_t>(kFeatureBatch, test_indices.size() - start);
    const Tensor f = features(ds.batch(test_indices.subspan(start, n)));
    for (std::size_t i = 0; i < n; ++i, ++row)
      for (Eigen::Index j = 0; j < feats.cols(); ++j) feats(row, j) = f[i * feats.cols() + j];
  }
  reference_ = feature_stats(feats);
}

Tensor FidScorer::features(const Tensor& images) const {
  NoGradGuard guard;
  return extractor_.features(images, false);
}

double FidScorer::score(const LatentGenerator& g, int samples, Rng rng) const {
  if (samples < 2) throw Error(ErrorCategory::config, "fid: need at least two generated samples");
  NoGradGuard guard;
  const int m = extractor_.arch().feature_dim;
  Eigen::MatrixXd feats(samples, m);
  for (int start = 0; start < samples; start += kFeatureBatch) {
    const int n = std::min(kFeatureBatch, samples - start);
    const Tensor f = features(g.generate(Tensor::randn({n, g.latent_dim()}, rng)));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) feats(start + i, j) = f[static_cast<std::size_t>(i) * m + j];
  }
  return frechet_distance(feature_stats(feats), reference_);
}

TrainOutcome train_vae(const Dataset& ds, const Split& split, const VaeArch& arch, const VaeTrainConfig& config,
                       const TrainOptions& options, ModelCheckpoint* extractor_out) {
  check_image_size(ds, arch.image_size, "vae");
  if (config.epochs < 1) throw Error(ErrorCategory::config, "vae: epochs must be at least 1");
  const int steps = steps_per_epoch(split, config.batch, "vae");
  const Rng root(options.seed);
  Rng init = root.fork(1);
  Encoder enc(arch, init);
  Decoder dec(arch, init);
  VaeTrainer trainer(enc, dec, config, root.fork(2));

  std::string log = "step,total,recon,kld,epoch\n";
  std::vector<std::pair<int, ModelCheckpoint>> snapshots;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = shuffled(split.train, root.fork(3).fork(epoch));
    double recon_sum = 0;
    for (int s = 0; s < steps; ++s, ++step) {
      const auto idx = std::span(order).subspan(static_cast<std::size_t>(s) * config.batch, config.batch);
      const VaeStepLosses l = trainer.step(ds.batch(idx), step);
      recon_sum += l.recon;
      if (step % options.log_every == 0) {
        log += std::to_string(step) + "," + fmt(l.total) + "," + fmt(l.recon) + "," + fmt(l.kld) + "," +
               std::to_string(epoch) + "\n";
      }
    }
    note(options, "vae epoch " + std::to_string(epoch) + " mean recon " + fmt(recon_sum / steps));
    if (keeps_snapshot(epoch, config.epochs)) {
      ModelCheckpoint snap;
      snap.merge(nn::state(enc), "encoder.");
      snap.merge(nn::state(dec), "decoder.");
      snapshots.emplace_back(epoch, std::move(snap));
    }
  }

  const FidScorer scorer(enc, ds, split.test);
  Rng spare(0);
  Decoder candidate(arch, spare);
  TrainOutcome out = select_epoch(
      snapshots,
      [&](const ModelCheckpoint& snap) {
        nn::load_state(candidate, snap.subset("decoder."));
        return scorer.score(candidate, options.fid_samples, root.fork(4));
      },
      options, "vae");
  ModelCheckpoint extractor;
  extractor.merge(nn::state(enc), "encoder.");
  if (extractor_out) *extractor_out = extractor;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    write_text_atomic(options.out_dir / "vae_log.csv", log);
    write_fid_csv(options.out_dir / "vae_fid.csv", out.fid);
    write_checkpoint(options.out_dir / "vae.llck", out.selected);
    write_checkpoint(options.out_dir / "extractor.llck", extractor);
  }
  return out;
}

TrainOutcome train_gan(const Dataset& ds, const Split& split, const GanArch& arch, const GanTrainConfig& config,
                       const FidScorer& scorer, const TrainOptions& options) {
  check_image_size(ds, arch.image_size, "gan");
  if (config.epochs < 1) throw Error(ErrorCategory::config, "gan: epochs must be at least 1");
  const int steps = steps_per_epoch(split, config.batch, "gan");
  const Rng root(options.seed);
  Rng init = root.fork(11);
  Generator g(arch, init);
  Discriminator d(arch, init);
  GanTrainer trainer(g, d, config, root.fork(12));

  std::string log = "step,d_loss,g_loss,sigma,epoch\n";
  std::vector<std::pair<int, ModelCheckpoint>> snapshots;
  const std::int64_t total = static_cast<std::int64_t>(steps) * config.epochs;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = shuffled(split.train, root.fork(13).fork(epoch));
    double d_sum = 0, g_sum = 0;
    for (int s = 0; s < steps; ++s, ++step) {
      const auto idx = std::span(order).subspan(static_cast<std::size_t>(s) * config.batch, config.batch);
      const GanLosses l = trainer.step(ds.batch(idx), step, total);
      d_sum += l.d_loss;
      g_sum += l.g_loss;
      if (step % options.log_every == 0) {
        log += std::to_string(step) + "," + fmt(l.d_loss) + "," + fmt(l.g_loss) + "," + fmt(l.sigma) + "," +
               std::to_string(epoch) + "\n";
      }
    }
    note(options, "gan epoch " + std::to_string(epoch) + " mean d " + fmt(d_sum / steps) + " g " + fmt(g_sum / steps));
    if (keeps_snapshot(epoch, config.epochs)) {
      ModelCheckpoint snap;
      snap.merge(nn::state(g), "generator.");
      snap.merge(nn::state(d), "discriminator.");
      snapshots.emplace_back(epoch, std::move(snap));
    }
  }

  Rng spare(0);
  Generator candidate(arch, spare);
  TrainOutcome out = select_epoch(
      snapshots,
      [&](const ModelCheckpoint& snap) {
        nn::load_state(candidate, snap.subset("generator."));
        return scorer.score(candidate, options.fid_samples, root.fork(14));
      },
      options, "gan");
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    write_text_atomic(options.out_dir / "gan_log.csv", log);
    write_fid_csv(options.out_dir / "gan_fid.csv", out.fid);
    write_checkpoint(options.out_dir / "gan.llck", out.selected);
  }
  return out;
}

namespace {

int count_prefixed(const ModelCheckpoint& ckpt, const std::string& stem, const std::string& suffix) {
  int n = 0;
  while (ckpt.find(stem + std::to_string(n) + suffix)) ++n;
  return n;
}

}  // namespace

VaeArch infer_vae_arch(const ModelCheckpoint& ckpt) {
  const Tensor& mu = ckpt.at("encoder.mu.weight");
  const Tensor& stem = ckpt.at("encoder.stem.weight");
  const Tensor& feat = ckpt.at("encoder.fc.weight");
  VaeArch arch;
  arch.latent_dim = static_cast<int>(mu.dim(0));
  arch.channels = static_cast<int>(stem.dim(0));
  arch.feature_dim = static_cast<int>(feat.dim(0));
  arch.image_size = 4 << count_prefixed(ckpt, "encoder.block", ".conv1.weight");
  return arch;
}

GanArch infer_gan_arch(const ModelCheckpoint& ckpt) {
  const Tensor& fc = ckpt.at("generator.fc.weight");
  GanArch arch;
  arch.latent_dim = static_cast<int>(fc.dim(1));
  arch.channels = static_cast<int>(fc.dim(0) / 16);
  arch.image_size = 4 << count_prefixed(ckpt, "generator.up", ".weight");
  return arch;
}

LoadedModel load_model(const ModelCheckpoint& ckpt) {
  LoadedModel m;
  Rng spare(0);
  if (ckpt.find("generator.fc.weight")) {
    m.kind = ModelKind::gan;
    auto g = std::make_unique<Generator>(infer_gan_arch(ckpt), spare);
    nn::load_state(*g, ckpt.subset("generator."));
    m.generator = std::move(g);
    return m;
  }
  if (ckpt.find("decoder.fc.weight") && ckpt.find("encoder.stem.weight")) {
    m.kind = ModelKind::vae;
    const VaeArch arch = infer_vae_arch(ckpt);
    auto dec = std::make_unique<Decoder>(arch, spare);
    nn::load_state(*dec, ckpt.subset("decoder."));
    m.encoder = std::make_unique<Encoder>(arch, spare);
    nn::load_state(*m.encoder, ckpt.subset("encoder."));
    m.generator = std::move(dec);
    return m;
  }
  if (ckpt.find("encoder.stem.weight")) {
    m.kind = ModelKind::vae;
    m.encoder = std::make_unique<Encoder>(infer_vae_arch(ckpt), spare);
    nn::load_state(*m.encoder, ckpt.subset("encoder."));
    return m;
  }
  throw Error(ErrorCategory::format, "checkpoint holds neither a generator nor a VAE");
}

LoadedModel load_model(const std::filesystem::path& path) { return load_model(read_checkpoint(path)); }

void write_fid_csv(const std::filesystem::path& path, const std::vector<FidRow>& rows) {
  std::string out = "epoch,fid\n";
  for (const auto& r : rows) out += std::to_string(r.epoch) + "," + fmt(r.fid) + "\n";
  write_text_atomic(path, out);
}

}  // namespace latentlens
