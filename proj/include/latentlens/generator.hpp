#pragma once

#include <string>

#include "latentlens/tensor.hpp"

namespace latentlens {

/// A frozen latent-to-image map: the GAN generator, the VAE decoder, or a
/// test stub. generate() runs in inference mode but stays differentiable in z,
/// so direction training and latent search can backpropagate through it.
class LatentGenerator {
 public:
  virtual ~LatentGenerator() = default;
  virtual int latent_dim() const = 0;
  virtual int image_height() const = 0;
  virtual int image_width() const = 0;
  /// [B, d] -> [B, 1, H, W] in (-1, 1).
  virtual Tensor generate(const Tensor& z) const = 0;
  virtual std::string checksum() const = 0;
  /// Stops (or resumes) gradient accumulation into the generator's own
  /// parameters; values are untouched.
  virtual void set_frozen(bool) {}
};

/// Throws a shape error unless z is [B, d] for this generator.
inline void check_latent(const LatentGenerator& g, const Tensor& z, const char* where) {
  if (z.rank() != 2 || z.dim(1) != g.latent_dim()) {
    throw Error(ErrorCategory::shape, std::string(where) + ": latent must be [B, " + std::to_string(g.latent_dim()) +
                                          "], got " + shape_str(z.shape()));
  }
}

}  // namespace latentlens
