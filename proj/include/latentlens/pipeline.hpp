#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latentlens/dataset.hpp"
#include "latentlens/eval.hpp"
#include "latentlens/gan.hpp"
#include "latentlens/vae.hpp"

namespace latentlens {

using LogFn = std::function<void(const std::string&)>;

/// Frozen encoder features of the test split, used to score generators.
class FidScorer {
 public:
  FidScorer(const Encoder& extractor, const Dataset& ds, std::span<const std::size_t> test_indices);

  /// Fréchet distance between generated and test features; `samples`
  /// latents are drawn from rng.
  double score(const LatentGenerator& g, int samples, Rng rng) const;
  const FeatureStats& reference() const { return reference_; }

  /// Encoder features [N, feature_dim] of a [N, 1, H, W] batch, in eval mode.
  Tensor features(const Tensor& images) const;

 private:
  const Encoder& extractor_;
  FeatureStats reference_;
};

struct FidRow {
  int epoch = 0;
  double fid = 0;
};

struct TrainOutcome {
  ModelCheckpoint selected;  // full model state of the chosen epoch
  int selected_epoch = 0;
  double selected_fid = 0;
  double epoch1_fid = 0;
  std::vector<FidRow> fid;  // epoch 1 and the last five epochs
};

struct TrainOptions {
  std::uint64_t seed = 1;
  int log_every = 10;  // run-log row every this many steps
  int fid_samples = 500;
  std::filesystem::path out_dir;  // run log, fid log and checkpoints; empty = nothing written
  LogFn log;
};

/// Trains the VAE, scores epoch 1 and the last five epochs by Fréchet
/// distance using the final encoder as the frozen feature extractor, and
/// returns the argmin. `extractor_out` receives that final encoder
/// state under "encoder.*".
TrainOutcome train_vae(const Dataset& ds, const Split& split, const VaeArch& arch, const VaeTrainConfig& config,
                       const TrainOptions& options, ModelCheckpoint* extractor_out = nullptr);

/// Trains the GAN and picks among epoch 1 and the last five epochs with the
/// given frozen scorer.
TrainOutcome train_gan(const Dataset& ds, const Split& split, const GanArch& arch, const GanTrainConfig& config,
                       const FidScorer& scorer, const TrainOptions& options);

/// Architecture recovered from the tensor shapes of a saved model.
VaeArch infer_vae_arch(const ModelCheckpoint& ckpt);
GanArch infer_gan_arch(const ModelCheckpoint& ckpt);

enum class ModelKind { gan, vae };

struct LoadedModel {
  ModelKind kind = ModelKind::vae;
  std::unique_ptr<LatentGenerator> generator;  // null for an encoder-only extractor
  std::unique_ptr<Encoder> encoder;           // VAE only
};

/// Loads a GAN ("generator.*"), a VAE ("decoder.*", "encoder.*") or an
/// encoder-only extractor checkpoint.
LoadedModel load_model(const ModelCheckpoint& ckpt);
LoadedModel load_model(const std::filesystem::path& path);

/// Rows "epoch,fid".
void write_fid_csv(const std::filesystem::path& path, const std::vector<FidRow>& rows);

}  // namespace latentlens
