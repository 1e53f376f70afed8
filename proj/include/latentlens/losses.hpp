#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "latentlens/tensor.hpp"

namespace latentlens {

/// Floor inside the log of log_mse; the loss is offset so that a perfect
/// reconstruction scores exactly 0.
inline constexpr double kLogMseFloor = 1e-8;

namespace detail {

template <class S>
void require_nonempty_pair(const char* kind, const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (!a.defined() || !b.defined() || a.numel() == 0 || b.numel() == 0) {
    throw Error(ErrorCategory::shape, std::string(kind) + ": empty input");
  }
  if (a.numel() != b.numel()) {
    throw Error(ErrorCategory::shape, std::string(kind) + ": prediction " + shape_str(a.shape()) + " vs target " +
                                          shape_str(b.shape()));
  }
}

// Shared implementation of the pointwise regression losses.
// `value(diff)` is the per-element loss, `slope(diff)` its derivative.
template <class S, class V, class D>
BasicTensor<S> mean_pointwise(const char* kind, const BasicTensor<S>& pred, const BasicTensor<S>& target, V value,
                              D slope) {
  require_nonempty_pair(kind, pred, target);
  double acc = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) acc += value(static_cast<double>(pred[i]) - target[i]);
  const double n = static_cast<double>(pred.numel());
  auto pi = pred.impl(), ti = target.impl();
  return make_result<S>(kind, Shape{}, {static_cast<S>(acc / n)}, {&pred, &target}, [pi, ti, n, slope](const std::vector<S>& g) {
    for (std::size_t i = 0; i < pi->data.size(); ++i) {
      const S d = static_cast<S>(slope(static_cast<double>(pi->data[i]) - ti->data[i]) / n) * g[0];
      if (pi->requires_grad) pi->grad_buffer()[i] += d;
      if (ti->requires_grad) ti->grad_buffer()[i] -= d;
    }
  });
}

}  // namespace detail

template <class S>
BasicTensor<S> mse(const BasicTensor<S>& pred, const BasicTensor<S>& target) {
  return detail::mean_pointwise<S>("mse", pred, target, [](double d) { return d * d; }, [](double d) { return 2 * d; });
}

/// Mean absolute error; the subgradient at 0 is taken as 0.
template <class S>
BasicTensor<S> mae(const BasicTensor<S>& pred, const BasicTensor<S>& target) {
  return detail::mean_pointwise<S>(
      "mae", pred, target, [](double d) { return std::abs(d); }, [](double d) { return d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0); });
}

/// log(mse + floor) - log(floor).
template <class S>
BasicTensor<S> log_mse(const BasicTensor<S>& pred, const BasicTensor<S>& target) {
  detail::require_nonempty_pair("log_mse", pred, target);
  double acc = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    acc += d * d;
  }
  const double n = static_cast<double>(pred.numel());
  const double m = acc / n;
  const double value = std::log(m + kLogMseFloor) - std::log(kLogMseFloor);
  auto pi = pred.impl(), ti = target.impl();
  return detail::make_result<S>("log_mse", Shape{}, {static_cast<S>(value)}, {&pred, &target},
                                [pi, ti, n, m](const std::vector<S>& g) {
                                  const double k = 2.0 / (n * (m + kLogMseFloor)) * g[0];
                                  for (std::size_t i = 0; i < pi->data.size(); ++i) {
                                    const S d = static_cast<S>(k * (static_cast<double>(pi->data[i]) - ti->data[i]));
                                    if (pi->requires_grad) pi->grad_buffer()[i] += d;
                                    if (ti->requires_grad) ti->grad_buffer()[i] -= d;
                                  }
                                });
}

/// Mean over the batch of the numerically stable logistic loss
/// max(x,0) - x t + log(1 + e^{-|x|}). Logits may be [B] or [B, 1].
template <class S>
BasicTensor<S> bce_with_logits(const BasicTensor<S>& logits, std::span<const S> targets) {
  if (logits.numel() == 0 || targets.empty()) throw Error(ErrorCategory::shape, "bce_with_logits: empty input");
  if (logits.numel() != targets.size()) {
    throw Error(ErrorCategory::shape, "bce_with_logits: " + std::to_string(logits.numel()) + " logits vs " +
                                          std::to_string(targets.size()) + " targets");
  }
  std::vector<S> t(targets.begin(), targets.end());
  double acc = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double x = logits[i];
    acc += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(t.size());
  auto li = logits.impl();
  return detail::make_result<S>("bce_with_logits", Shape{}, {static_cast<S>(acc / n)}, {&logits},
                                [li, t = std::move(t), n](const std::vector<S>& g) {
                                  auto& gl = li->grad_buffer();
                                  for (std::size_t i = 0; i < t.size(); ++i) {
                                    const double x = li->data[i];
                                    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                                    gl[i] += static_cast<S>((s - t[i]) / n) * g[0];
                                  }
                                });
}

template <class S>
BasicTensor<S> bce_with_logits(const BasicTensor<S>& logits, S target) {
  std::vector<S> t(logits.numel(), target);
  return bce_with_logits<S>(logits, std::span<const S>(t));
}

/// Mean cross-entropy of [B, K] logits against integer class labels.
template <class S>
BasicTensor<S> softmax_cross_entropy(const BasicTensor<S>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw Error(ErrorCategory::shape, "softmax_cross_entropy: logits must be [B, K], got " + shape_str(logits.shape()));
  }
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw Error(ErrorCategory::shape, "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                                          std::to_string(batch));
  }
  std::vector<S> probs(logits.numel());
  double acc = 0;
  for (std::int64_t n = 0; n < batch; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= classes) {
      throw Error(ErrorCategory::shape, "softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                            std::to_string(classes) + ")");
    }
    const S* row = logits.data().data() + n * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0;
    for (std::int64_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
    for (std::int64_t k = 0; k < classes; ++k) probs[n * classes + k] = static_cast<S>(std::exp(row[k] - mx) / z);
    acc += -(row[y] - mx - std::log(z));
  }
  std::vector<int> y(labels.begin(), labels.end());
  auto li = logits.impl();
  return detail::make_result<S>("softmax_cross_entropy", Shape{}, {static_cast<S>(acc / batch)}, {&logits},
                                [li, probs = std::move(probs), y = std::move(y), batch, classes](const std::vector<S>& g) {
                                  auto& gl = li->grad_buffer();
                                  const S k = g[0] / static_cast<S>(batch);
                                  for (std::int64_t n = 0; n < batch; ++n)
                                    for (std::int64_t c = 0; c < classes; ++c) {
                                      const S onehot = (c == y[n]) ? S(1) : S(0);
                                      gl[n * classes + c] += (probs[n * classes + c] - onehot) * k;
                                    }
                                });
}

/// KL(N(mu, e^logvar) || N(0, I)) summed over latent dims, averaged over the batch.
template <class S>
BasicTensor<S> kld_diag_gaussian(const BasicTensor<S>& mu, const BasicTensor<S>& logvar) {
  if (mu.shape() != logvar.shape()) {
    throw Error(ErrorCategory::shape, "kld_diag_gaussian: mu " + shape_str(mu.shape()) + " vs logvar " +
                                          shape_str(logvar.shape()));
  }
  const double batch = mu.rank() >= 2 ? static_cast<double>(mu.dim(0)) : 1.0;
  constexpr double lo = -80, hi = 50;
  double acc = 0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const double lv = std::clamp(static_cast<double>(logvar[i]), lo, hi);
    acc += static_cast<double>(mu[i]) * mu[i] + std::exp(lv) - 1.0 - lv;
  }
  auto mi = mu.impl(), vi = logvar.impl();
  return detail::make_result<S>("kld_diag_gaussian", Shape{}, {static_cast<S>(0.5 * acc / batch)}, {&mu, &logvar},
                                [mi, vi, batch](const std::vector<S>& g) {
                                  const double k = 0.5 / batch * g[0];
                                  for (std::size_t i = 0; i < mi->data.size(); ++i) {
                                    if (mi->requires_grad) mi->grad_buffer()[i] += static_cast<S>(k * 2.0 * mi->data[i]);
                                    if (vi->requires_grad) {
                                      const double lv = vi->data[i];
                                      const double slope = (lv < lo || lv > hi) ? 0.0 : std::exp(lv) - 1.0;
                                      vi->grad_buffer()[i] += static_cast<S>(k * slope);
                                    }
                                  }
                                });
}

}  // namespace latentlens
