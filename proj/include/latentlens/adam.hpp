#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "latentlens/tensor.hpp"

namespace latentlens {

template <class S>
struct NamedParam {
  std::string name;
  BasicTensor<S> tensor;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. step() consumes and clears the gradients.
template <class S>
class Adam {
 public:
  Adam(std::vector<NamedParam<S>> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    if (!(config_.lr > 0)) throw Error(ErrorCategory::config, "adam: learning rate must be positive");
    for (const auto& p : params_) {
      first_.emplace_back(p.tensor.numel(), 0.0);
      second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  void step() {
    for (const auto& p : params_) {
      for (S g : p.tensor.grad()) {
        if (!std::isfinite(g)) {
          throw Error(ErrorCategory::numeric, "adam: non-finite gradient in parameter '" + p.name + "'");
        }
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t j = 0; j < params_.size(); ++j) {
      auto& t = params_[j].tensor;
      if (!t.has_grad()) continue;
      auto w = t.mutable_data();
      auto g = t.grad();
      auto& m = first_[j];
      auto& v = second_[j];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.beta1 * m[i] + (1 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1 - config_.beta2) * static_cast<double>(g[i]) * g[i];
        w[i] -= static_cast<S>(config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps));
      }
      t.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<NamedParam<S>>& params() const { return params_; }

 private:
  std::vector<NamedParam<S>> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> first_, second_;
  std::int64_t steps_ = 0;
};

}  // namespace latentlens
