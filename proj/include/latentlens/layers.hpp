#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "latentlens/adam.hpp"
#include "latentlens/checkpoint.hpp"
#include "latentlens/ops.hpp"

namespace latentlens::nn {

using StateVisitor = std::function<void(const std::string& name, Tensor& tensor, bool trainable)>;

/// Weight initialization: DCGAN-style N(0, 0.02) or He-normal on fan-in.
enum class Init { dcgan, he };

inline Tensor init_weight(Shape shape, std::int64_t fan_in, Init init, Rng& rng) {
  const double stddev = init == Init::dcgan ? 0.02 : std::sqrt(2.0 / static_cast<double>(fan_in));
  return Tensor::randn(std::move(shape), rng, stddev).set_requires_grad(true);
}

inline Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape)).set_requires_grad(true); }

struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(int in, int out, Init init, Rng& rng)
      : weight(init_weight({out, in}, in, init, rng)), bias(zeros_param({out})) {}

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + "weight", weight, true);
    f(prefix + "bias", bias, true);
  }
};

struct Conv2d {
  Tensor weight, bias;
  ConvGeometry geometry;

  Conv2d() = default;
  Conv2d(int in, int out, int k, ConvGeometry geo, Init init, Rng& rng)
      : weight(init_weight({out, in, k, k}, static_cast<std::int64_t>(in) * k * k, init, rng)),
        bias(zeros_param({out})),
        geometry(geo) {}

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, geometry); }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + "weight", weight, true);
    f(prefix + "bias", bias, true);
  }
};

struct ConvTranspose2d {
  Tensor weight, bias;
  ConvGeometry geometry;

  ConvTranspose2d() = default;
  ConvTranspose2d(int in, int out, int k, ConvGeometry geo, Init init, Rng& rng)
      : weight(init_weight({in, out, k, k}, static_cast<std::int64_t>(in) * k * k, init, rng)),
        bias(zeros_param({out})),
        geometry(geo) {}

  Tensor operator()(const Tensor& x) const { return conv_transpose2d(x, weight, bias, geometry); }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + "weight", weight, true);
    f(prefix + "bias", bias, true);
  }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  BatchNormBuffers<float> buffers;

  BatchNorm2d() = default;
  BatchNorm2d(int channels, Init init, Rng& rng)
      : gamma(init == Init::dcgan ? Tensor::randn({channels}, rng, 0.02) : Tensor::zeros({channels})),
        beta(zeros_param({channels})),
        buffers{Tensor::zeros({channels}), Tensor::full({channels}, 1.0f)} {
    for (auto& g : gamma.mutable_data()) g += 1.0f;
    gamma.set_requires_grad(true);
  }

  // Tensor handles share storage, so training mode updates the running
  // statistics even through a const layer.
  Tensor operator()(const Tensor& x, bool training) const {
    auto b = buffers;
    return batchnorm2d(x, gamma, beta, b, training);
  }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + "gamma", gamma, true);
    f(prefix + "beta", beta, true);
    f(prefix + "running_mean", buffers.running_mean, false);
    f(prefix + "running_var", buffers.running_var, false);
  }
};

/// Trainable tensors of any network exposing visit().
template <class M>
std::vector<NamedParam<float>> parameters(M& m) {
  std::vector<NamedParam<float>> out;
  m.visit("", [&](const std::string& name, Tensor& t, bool trainable) {
    if (trainable) out.push_back({name, t});
  });
  return out;
}

/// Parameters and buffers, for persistence.
template <class M>
ModelCheckpoint state(M& m) {
  ModelCheckpoint ckpt;
  m.visit("", [&](const std::string& name, Tensor& t, bool) { ckpt.add(name, t); });
  return ckpt;
}

/// Copies values from a checkpoint into the network. Every tensor of the
/// network must be present with a matching shape.
template <class M>
void load_state(M& m, const ModelCheckpoint& ckpt) {
  m.visit("", [&](const std::string& name, Tensor& t, bool) {
    const Tensor& src = ckpt.at(name);
    if (src.shape() != t.shape()) {
      throw Error(ErrorCategory::format, "checkpoint entry '" + name + "' has shape " + shape_str(src.shape()) +
                                             ", network expects " + shape_str(t.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  });
}

template <class M>
void set_trainable(M& m, bool on) {
  m.visit("", [&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) {
      t.set_requires_grad(on);
      if (!on) t.zero_grad();
    }
  });
}

template <class M>
std::string checksum(M& m) {
  return checkpoint_checksum(state(m));
}

}  // namespace latentlens::nn
