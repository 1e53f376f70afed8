#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <utility>
#include <string>
#include <vector>

#include "latentlens/gemm.hpp"
#include "latentlens/tensor.hpp"

namespace latentlens {

namespace detail {

[[noreturn]] inline void shape_error(const char* kind, const std::string& msg) {
  throw Error(ErrorCategory::shape, std::string(kind) + ": " + msg);
}

template <class S>
void require_same_shape(const char* kind, const BasicTensor<S>& a, const BasicTensor<S>& b) {
  if (a.shape() != b.shape()) shape_error(kind, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
void require_rank(const char* kind, const BasicTensor<S>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    shape_error(kind, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

// df(x, y) is the local derivative. With KeepOutput the forward values are
// kept for backward; otherwise df must not read y.
template <class S, bool KeepOutput = false, class F, class DF>
BasicTensor<S> unary(const char* kind, const BasicTensor<S>& x, F f, DF df) {
  const auto& xv = x.vec();
  std::vector<S> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  auto xi = x.impl();
  if constexpr (KeepOutput) {
    auto kept = std::make_shared<const std::vector<S>>(y);
    return make_result<S>(kind, x.shape(), std::move(y), {&x}, [xi, kept, df](const std::vector<S>& g) {
      auto& gx = xi->grad_buffer();
      const auto& yv = *kept;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], yv[i]);
    });
  } else {
    return make_result<S>(kind, x.shape(), std::move(y), {&x}, [xi, df](const std::vector<S>& g) {
      auto& gx = xi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], S(0));
    });
  }
}

// Output columns [lo, hi) whose input column ox*stride - pad + kx lies inside [0, width).
inline std::pair<int, int> valid_range(int out_w, int width, int stride, int pad, int kx) {
  const int off = kx - pad;
  int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  int hi = width - 1 - off < 0 ? 0 : (width - 1 - off) / stride + 1;
  lo = std::min(lo, out_w);
  hi = std::clamp(hi, lo, out_w);
  return {lo, hi};
}

template <class S>
std::unique_ptr<S[]> scratch(std::size_t n) {
  return std::make_unique_for_overwrite<S[]>(n);
}

// Unfolds conv patches of a [B, C, H, W] image into col[C*k*k][B*Ho*Wo].
template <class S>
void im2col(const S* img, int batch, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, S* col) {
  const std::int64_t plane = static_cast<std::int64_t>(out_h) * out_w;
  const std::int64_t cols = plane * batch;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* dst = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * cols;
        const auto [lo, hi] = valid_range(out_w, width, stride, pad, kx);
        const int off = kx - pad;
        for (int b = 0; b < batch; ++b) {
          const S* src = img + (static_cast<std::int64_t>(b) * channels + c) * height * width;
          S* row = dst + b * plane;
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy * stride - pad + ky;
            S* out = row + static_cast<std::int64_t>(oy) * out_w;
            if (iy < 0 || iy >= height) {
              std::fill(out, out + out_w, S(0));
              continue;
            }
            const S* line = src + static_cast<std::int64_t>(iy) * width + off;
            std::fill(out, out + lo, S(0));
            if (stride == 1) {
              std::copy(line + lo, line + hi, out + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) out[ox] = line[ox * stride];
            }
            std::fill(out + hi, out + out_w, S(0));
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters col back onto the image, accumulating.
template <class S>
void col2im(const S* col, int batch, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, S* img) {
  const std::int64_t plane = static_cast<std::int64_t>(out_h) * out_w;
  const std::int64_t cols = plane * batch;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* src = col + ((static_cast<std::int64_t>(c) * k + ky) * k + kx) * cols;
        const auto [lo, hi] = valid_range(out_w, width, stride, pad, kx);
        const int off = kx - pad;
        for (int b = 0; b < batch; ++b) {
          S* dst = img + (static_cast<std::int64_t>(b) * channels + c) * height * width;
          const S* row = src + b * plane;
          for (int oy = 0; oy < out_h; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= height) continue;
            const S* in = row + static_cast<std::int64_t>(oy) * out_w;
            S* line = dst + static_cast<std::int64_t>(iy) * width + off;
            if (stride == 1) {
              for (int ox = lo; ox < hi; ++ox) line[ox] += in[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) line[ox * stride] += in[ox];
            }
          }
        }
      }
    }
  }
}

// [B][C][P] <-> [C][B*P]
template <class S>
void to_channel_major(const S* src, int batch, int channels, std::int64_t plane, S* dst) {
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      std::copy_n(src + (static_cast<std::int64_t>(b) * channels + c) * plane, plane,
                  dst + (static_cast<std::int64_t>(c) * batch + b) * plane);
}

template <class S>
void add_from_channel_major(const S* src, int batch, int channels, std::int64_t plane, S* dst) {
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c) {
      const S* s = src + (static_cast<std::int64_t>(c) * batch + b) * plane;
      S* d = dst + (static_cast<std::int64_t>(b) * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) d[i] += s[i];
    }
}

template <class S>
void accumulate_bias_grad(const std::vector<S>& g, int batch, int channels, std::int64_t plane, std::vector<S>& gb) {
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c) {
      const S* p = g.data() + (static_cast<std::int64_t>(b) * channels + c) * plane;
      S acc = 0;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      gb[c] += acc;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class S>
BasicTensor<S> add(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<S> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<S>("add", a.shape(), std::move(y), {&a, &b}, [ai, bi](const std::vector<S>& g) {
    for (auto* t : {ai.get(), bi.get()}) {
      if (!t->requires_grad) continue;
      auto& gt = t->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

template <class S>
BasicTensor<S> sub(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<S> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<S>("sub", a.shape(), std::move(y), {&a, &b}, [ai, bi](const std::vector<S>& g) {
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class S>
BasicTensor<S> mul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<S> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<S>("mul", a.shape(), std::move(y), {&a, &b}, [ai, bi](const std::vector<S>& g) {
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
    }
  });
}

template <class S>
BasicTensor<S> scale(const BasicTensor<S>& x, S factor) {
  return detail::unary<S>("scale", x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <class S>
BasicTensor<S> add_scalar(const BasicTensor<S>& x, S offset) {
  return detail::unary<S>("add_scalar", x, [offset](S v) { return v + offset; }, [](S, S) { return S(1); });
}

/// exp with the argument clamped to a finite-safe window; zero slope outside.
template <class S>
BasicTensor<S> exp(const BasicTensor<S>& x) {
  return detail::unary<S, true>(
      "exp", x, [](S v) { return std::exp(std::clamp(v, S(-80), S(50))); },
      [](S v, S y) { return (v < S(-80) || v > S(50)) ? S(0) : y; });
}

template <class S>
BasicTensor<S> relu(const BasicTensor<S>& x) {
  return detail::unary<S>("relu", x, [](S v) { return v > 0 ? v : S(0); }, [](S v, S) { return v > 0 ? S(1) : S(0); });
}

template <class S>
BasicTensor<S> leaky_relu(const BasicTensor<S>& x, S slope = S(0.2)) {
  return detail::unary<S>(
      "leaky_relu", x, [slope](S v) { return v > 0 ? v : slope * v; },
      [slope](S v, S) { return v > 0 ? S(1) : slope; });
}

template <class S>
BasicTensor<S> tanh(const BasicTensor<S>& x) {
  // Kept strictly inside (-1, 1) even where tanh rounds to +-1.
  return detail::unary<S, true>(
      "tanh", x,
      [](S v) {
        constexpr S edge = S(1) - std::numeric_limits<S>::epsilon() / 2;
        const S y = std::tanh(v);
        return y > edge ? edge : (y < -edge ? -edge : y);
      },
      [](S, S y) { return S(1) - y * y; });
}

template <class S>
BasicTensor<S> sigmoid(const BasicTensor<S>& x) {
  return detail::unary<S, true>(
      "sigmoid", x,
      [](S v) {
        if (v >= 0) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

template <class S>
BasicTensor<S> reshape(const BasicTensor<S>& x, Shape shape) {
  if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
    detail::shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xi = x.impl();
  return detail::make_result<S>("reshape", std::move(shape), x.vec(), {&x}, [xi](const std::vector<S>& g) {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Concatenates two [B, C, H, W] tensors along channels.
template <class S>
BasicTensor<S> concat_channels(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_rank("concat_channels", a, 4, "first input");
  detail::require_rank("concat_channels", b, 4, "second input");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    detail::shape_error("concat_channels", "incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  std::vector<S> y(static_cast<std::size_t>(batch * (ca + cb) * plane));
  for (std::int64_t n = 0; n < batch; ++n) {
    std::copy_n(a.data().data() + n * ca * plane, ca * plane, y.data() + n * (ca + cb) * plane);
    std::copy_n(b.data().data() + n * cb * plane, cb * plane, y.data() + (n * (ca + cb) + ca) * plane);
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<S>(
      "concat_channels", Shape{batch, ca + cb, a.dim(2), a.dim(3)}, std::move(y), {&a, &b},
      [ai, bi, batch, ca, cb, plane](const std::vector<S>& g) {
        for (std::int64_t n = 0; n < batch; ++n) {
          if (ai->requires_grad) {
            auto& ga = ai->grad_buffer();
            for (std::int64_t i = 0; i < ca * plane; ++i) ga[n * ca * plane + i] += g[n * (ca + cb) * plane + i];
          }
          if (bi->requires_grad) {
            auto& gb = bi->grad_buffer();
            for (std::int64_t i = 0; i < cb * plane; ++i)
              gb[n * cb * plane + i] += g[(n * (ca + cb) + ca) * plane + i];
          }
        }
      });
}

template <class S>
BasicTensor<S> sum(const BasicTensor<S>& x) {
  S acc = 0;
  for (S v : x.data()) acc += v;
  auto xi = x.impl();
  return detail::make_result<S>("sum", Shape{}, {acc}, {&x}, [xi](const std::vector<S>& g) {
    auto& gx = xi->grad_buffer();
    for (auto& v : gx) v += g[0];
  });
}

template <class S>
BasicTensor<S> mean(const BasicTensor<S>& x) {
  S acc = 0;
  for (S v : x.data()) acc += v;
  const S n = static_cast<S>(x.numel());
  auto xi = x.impl();
  return detail::make_result<S>("mean", Shape{}, {acc / n}, {&x}, [xi, n](const std::vector<S>& g) {
    auto& gx = xi->grad_buffer();
    for (auto& v : gx) v += g[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

template <class S>
BasicTensor<S> matmul(const BasicTensor<S>& a, const BasicTensor<S>& b) {
  detail::require_rank("matmul", a, 2, "left operand");
  detail::require_rank("matmul", b, 2, "right operand");
  if (a.dim(1) != b.dim(0)) {
    detail::shape_error("matmul", "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int m = static_cast<int>(a.dim(0)), k = static_cast<int>(a.dim(1)), n = static_cast<int>(b.dim(1));
  std::vector<S> y(static_cast<std::size_t>(m) * n);
  blas::gemm(false, false, m, n, k, S(1), a.data().data(), b.data().data(), S(0), y.data());
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<S>("matmul", Shape{m, n}, std::move(y), {&a, &b}, [ai, bi, m, n, k](const std::vector<S>& g) {
    if (ai->requires_grad) blas::gemm(false, true, m, k, n, S(1), g.data(), bi->data.data(), S(1), ai->grad_buffer().data());
    if (bi->requires_grad) blas::gemm(true, false, k, n, m, S(1), ai->data.data(), g.data(), S(1), bi->grad_buffer().data());
  });
}

template <class S>
BasicTensor<S> transpose(const BasicTensor<S>& x) {
  detail::require_rank("transpose", x, 2, "input");
  const std::int64_t r = x.dim(0), c = x.dim(1);
  std::vector<S> y(x.numel());
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  auto xi = x.impl();
  return detail::make_result<S>("transpose", Shape{c, r}, std::move(y), {&x}, [xi, r, c](const std::vector<S>& g) {
    auto& gx = xi->grad_buffer();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

/// y = x W^T + b for x [B, in], W [out, in], b [out] (optional).
template <class S>
BasicTensor<S> linear(const BasicTensor<S>& x, const BasicTensor<S>& weight, const BasicTensor<S>& bias = {}) {
  detail::require_rank("linear", x, 2, "input");
  detail::require_rank("linear", weight, 2, "weight");
  if (x.dim(1) != weight.dim(1)) {
    detail::shape_error("linear", "input features " + std::to_string(x.dim(1)) + " != weight in-features " +
                                      std::to_string(weight.dim(1)));
  }
  const int batch = static_cast<int>(x.dim(0)), in = static_cast<int>(x.dim(1)), out = static_cast<int>(weight.dim(0));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out)) {
    detail::shape_error("linear", "bias " + shape_str(bias.shape()) + " does not match out-features " + std::to_string(out));
  }
  std::vector<S> y(static_cast<std::size_t>(batch) * out);
  if (bias.defined()) {
    for (int n = 0; n < batch; ++n) std::copy_n(bias.data().data(), out, y.data() + static_cast<std::size_t>(n) * out);
  }
  blas::gemm(false, true, batch, out, in, S(1), x.data().data(), weight.data().data(), bias.defined() ? S(1) : S(0), y.data());
  auto xi = x.impl(), wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result<S>(
      "linear", Shape{batch, out}, std::move(y), {&x, &weight, &bias}, [xi, wi, bi, batch, in, out](const std::vector<S>& g) {
        if (xi->requires_grad) blas::gemm(false, false, batch, in, out, S(1), g.data(), wi->data.data(), S(1), xi->grad_buffer().data());
        if (wi->requires_grad) blas::gemm(true, false, out, in, batch, S(1), g.data(), xi->data.data(), S(1), wi->grad_buffer().data());
        if (detail::needs_grad(bi)) {
          auto& gb = bi->grad_buffer();
          for (int n = 0; n < batch; ++n)
            for (int o = 0; o < out; ++o) gb[o] += g[static_cast<std::size_t>(n) * out + o];
        }
      });
}

// ---------------------------------------------------------------------------
// Convolutions. Weights follow the usual layouts: conv2d [out, in, k, k],
// conv_transpose2d [in, out, k, k]. Square kernels only.

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
};

template <class S>
BasicTensor<S> conv2d(const BasicTensor<S>& x, const BasicTensor<S>& weight, const BasicTensor<S>& bias = {},
                      ConvGeometry geo = {}) {
  detail::require_rank("conv2d", x, 4, "input");
  detail::require_rank("conv2d", weight, 4, "weight");
  const int batch = static_cast<int>(x.dim(0)), cin = static_cast<int>(x.dim(1));
  const int height = static_cast<int>(x.dim(2)), width = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(weight.dim(0)), k = static_cast<int>(weight.dim(2));
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    detail::shape_error("conv2d", "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    detail::shape_error("conv2d", "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) + " channels");
  }
  if (geo.stride < 1 || geo.pad < 0 || height + 2 * geo.pad < k || width + 2 * geo.pad < k) {
    detail::shape_error("conv2d", "kernel " + std::to_string(k) + " does not fit input " + shape_str(x.shape()));
  }
  const int out_h = (height + 2 * geo.pad - k) / geo.stride + 1;
  const int out_w = (width + 2 * geo.pad - k) / geo.stride + 1;
  const std::int64_t plane = static_cast<std::int64_t>(out_h) * out_w;
  const int ckk = cin * k * k;
  const int cols = static_cast<int>(plane * batch);

  auto col = detail::scratch<S>(static_cast<std::size_t>(ckk) * cols);
  detail::im2col(x.data().data(), batch, cin, height, width, k, geo.stride, geo.pad, out_h, out_w, col.get());
  auto tmp = detail::scratch<S>(static_cast<std::size_t>(cout) * cols);
  blas::gemm(false, false, cout, cols, ckk, S(1), weight.data().data(), col.get(), S(0), tmp.get());
  std::vector<S> y(static_cast<std::size_t>(batch) * cout * plane, S(0));
  detail::add_from_channel_major(tmp.get(), batch, cout, plane, y.data());
  if (bias.defined()) {
    for (int n = 0; n < batch; ++n)
      for (int c = 0; c < cout; ++c) {
        S* p = y.data() + (static_cast<std::int64_t>(n) * cout + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += bias[c];
      }
  }
  auto xi = x.impl(), wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result<S>(
      "conv2d", Shape{batch, cout, out_h, out_w}, std::move(y), {&x, &weight, &bias},
      [=](const std::vector<S>& g) {
        auto gt = detail::scratch<S>(static_cast<std::size_t>(cout) * cols);
        detail::to_channel_major(g.data(), batch, cout, plane, gt.get());
        if (wi->requires_grad) {
          auto c2 = detail::scratch<S>(static_cast<std::size_t>(ckk) * cols);
          detail::im2col(xi->data.data(), batch, cin, height, width, k, geo.stride, geo.pad, out_h, out_w, c2.get());
          blas::gemm(false, true, cout, ckk, cols, S(1), gt.get(), c2.get(), S(1), wi->grad_buffer().data());
        }
        if (detail::needs_grad(bi)) detail::accumulate_bias_grad(g, batch, cout, plane, bi->grad_buffer());
        if (xi->requires_grad) {
          auto gcol = detail::scratch<S>(static_cast<std::size_t>(ckk) * cols);
          blas::gemm(true, false, ckk, cols, cout, S(1), wi->data.data(), gt.get(), S(0), gcol.get());
          detail::col2im(gcol.get(), batch, cin, height, width, k, geo.stride, geo.pad, out_h, out_w,
                         xi->grad_buffer().data());
        }
      });
}

template <class S>
BasicTensor<S> conv_transpose2d(const BasicTensor<S>& x, const BasicTensor<S>& weight, const BasicTensor<S>& bias = {},
                                ConvGeometry geo = {}) {
  detail::require_rank("conv_transpose2d", x, 4, "input");
  detail::require_rank("conv_transpose2d", weight, 4, "weight");
  const int batch = static_cast<int>(x.dim(0)), cin = static_cast<int>(x.dim(1));
  const int in_h = static_cast<int>(x.dim(2)), in_w = static_cast<int>(x.dim(3));
  const int cout = static_cast<int>(weight.dim(1)), k = static_cast<int>(weight.dim(2));
  if (weight.dim(0) != cin || weight.dim(3) != k) {
    detail::shape_error("conv_transpose2d",
                        "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    detail::shape_error("conv_transpose2d",
                        "bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) + " channels");
  }
  const int out_h = (in_h - 1) * geo.stride - 2 * geo.pad + k;
  const int out_w = (in_w - 1) * geo.stride - 2 * geo.pad + k;
  if (geo.stride < 1 || geo.pad < 0 || out_h <= 0 || out_w <= 0) {
    detail::shape_error("conv_transpose2d", "empty output for input " + shape_str(x.shape()));
  }
  const std::int64_t in_plane = static_cast<std::int64_t>(in_h) * in_w;
  const std::int64_t out_plane = static_cast<std::int64_t>(out_h) * out_w;
  const int okk = cout * k * k;
  const int cols = static_cast<int>(in_plane * batch);

  auto xt = detail::scratch<S>(static_cast<std::size_t>(cin) * cols);
  detail::to_channel_major(x.data().data(), batch, cin, in_plane, xt.get());
  auto col = detail::scratch<S>(static_cast<std::size_t>(okk) * cols);
  blas::gemm(true, false, okk, cols, cin, S(1), weight.data().data(), xt.get(), S(0), col.get());
  std::vector<S> y(static_cast<std::size_t>(batch) * cout * out_plane, S(0));
  detail::col2im(col.get(), batch, cout, out_h, out_w, k, geo.stride, geo.pad, in_h, in_w, y.data());
  if (bias.defined()) {
    for (int n = 0; n < batch; ++n)
      for (int c = 0; c < cout; ++c) {
        S* p = y.data() + (static_cast<std::int64_t>(n) * cout + c) * out_plane;
        for (std::int64_t i = 0; i < out_plane; ++i) p[i] += bias[c];
      }
  }
  auto xi = x.impl(), wi = weight.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return detail::make_result<S>(
      "conv_transpose2d", Shape{batch, cout, out_h, out_w}, std::move(y), {&x, &weight, &bias},
      [=](const std::vector<S>& g) {
        auto gcol = detail::scratch<S>(static_cast<std::size_t>(okk) * cols);
        detail::im2col(g.data(), batch, cout, out_h, out_w, k, geo.stride, geo.pad, in_h, in_w, gcol.get());
        if (wi->requires_grad) {
          auto xt2 = detail::scratch<S>(static_cast<std::size_t>(cin) * cols);
          detail::to_channel_major(xi->data.data(), batch, cin, in_plane, xt2.get());
          blas::gemm(false, true, cin, okk, cols, S(1), xt2.get(), gcol.get(), S(1), wi->grad_buffer().data());
        }
        if (detail::needs_grad(bi)) detail::accumulate_bias_grad(g, batch, cout, out_plane, bi->grad_buffer());
        if (xi->requires_grad) {
          auto gxt = detail::scratch<S>(static_cast<std::size_t>(cin) * cols);
          blas::gemm(false, false, cin, cols, okk, S(1), wi->data.data(), gcol.get(), S(0), gxt.get());
          detail::add_from_channel_major(gxt.get(), batch, cin, in_plane, xi->grad_buffer().data());
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and resampling

template <class S>
struct BatchNormBuffers {
  BasicTensor<S> running_mean;
  BasicTensor<S> running_var;
};

/// Per-channel batch normalization of [B, C, H, W]. Training mode normalizes
/// with batch statistics and folds them into the running buffers; eval mode
/// uses the running buffers.
template <class S>
BasicTensor<S> batchnorm2d(const BasicTensor<S>& x, const BasicTensor<S>& gamma, const BasicTensor<S>& beta,
                           BatchNormBuffers<S>& buffers, bool training, double momentum = 0.1, double eps = 1e-5) {
  detail::require_rank("batchnorm2d", x, 4, "input");
  const int batch = static_cast<int>(x.dim(0)), channels = static_cast<int>(x.dim(1));
  const std::int64_t plane = x.dim(2) * x.dim(3);
  for (const BasicTensor<S>* t : std::initializer_list<const BasicTensor<S>*>{&gamma, &beta, &buffers.running_mean, &buffers.running_var}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      detail::shape_error("batchnorm2d", "per-channel tensor " + shape_str(t->shape()) + " does not match " +
                                             std::to_string(channels) + " channels");
    }
  }
  const double count = static_cast<double>(batch) * plane;
  if (training && count < 2) detail::shape_error("batchnorm2d", "training mode needs more than one value per channel");

  std::vector<S> mean_c(channels), invstd(channels);
  if (training) {
    auto rm = buffers.running_mean.mutable_data();
    auto rv = buffers.running_var.mutable_data();
    for (int c = 0; c < channels; ++c) {
      double s = 0;
      for (int n = 0; n < batch; ++n) {
        const S* p = x.data().data() + (static_cast<std::int64_t>(n) * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / count;
      double ss = 0;
      for (int n = 0; n < batch; ++n) {
        const S* p = x.data().data() + (static_cast<std::int64_t>(n) * channels + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) ss += (p[i] - m) * (p[i] - m);
      }
      const double var = ss / count;
      mean_c[c] = static_cast<S>(m);
      invstd[c] = static_cast<S>(1.0 / std::sqrt(var + eps));
      rm[c] = static_cast<S>((1 - momentum) * rm[c] + momentum * m);
      rv[c] = static_cast<S>((1 - momentum) * rv[c] + momentum * var * count / (count - 1));
    }
  } else {
    for (int c = 0; c < channels; ++c) {
      mean_c[c] = buffers.running_mean[c];
      invstd[c] = static_cast<S>(1.0 / std::sqrt(static_cast<double>(buffers.running_var[c]) + eps));
    }
  }

  std::vector<S> xhat(x.numel()), y(x.numel());
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * channels + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        xhat[off + i] = (x[off + i] - mean_c[c]) * invstd[c];
        y[off + i] = gamma[c] * xhat[off + i] + beta[c];
      }
    }

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return detail::make_result<S>(
      "batchnorm2d", x.shape(), std::move(y), {&x, &gamma, &beta},
      [xi, gi, bi, xhat = std::move(xhat), invstd, batch, channels, plane, training, count](const std::vector<S>& g) {
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < channels; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * channels + c) * plane;
            for (std::int64_t i = 0; i < plane; ++i) {
              sum_g[c] += g[off + i];
              sum_gx[c] += g[off + i] * xhat[off + i];
            }
          }
        if (gi->requires_grad) {
          auto& gg = gi->grad_buffer();
          for (int c = 0; c < channels; ++c) gg[c] += static_cast<S>(sum_gx[c]);
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (int c = 0; c < channels; ++c) gb[c] += static_cast<S>(sum_g[c]);
        }
        if (!xi->requires_grad) return;
        auto& gx = xi->grad_buffer();
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < channels; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * channels + c) * plane;
            const S k = gi->data[c] * invstd[c];
            if (training) {
              const S mg = static_cast<S>(sum_g[c] / count), mgx = static_cast<S>(sum_gx[c] / count);
              for (std::int64_t i = 0; i < plane; ++i) gx[off + i] += k * (g[off + i] - mg - xhat[off + i] * mgx);
            } else {
              for (std::int64_t i = 0; i < plane; ++i) gx[off + i] += k * g[off + i];
            }
          }
      });
}

template <class S>
BasicTensor<S> upsample_nearest(const BasicTensor<S>& x, int factor) {
  detail::require_rank("upsample_nearest", x, 4, "input");
  if (factor < 1) detail::shape_error("upsample_nearest", "factor must be >= 1");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  std::vector<S> y(static_cast<std::size_t>(nc * oh * ow));
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) y[(p * oh + i) * ow + j] = x[(p * h + i / factor) * w + j / factor];
  auto xi = x.impl();
  return detail::make_result<S>(
      "upsample_nearest", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(y), {&x},
      [xi, nc, h, w, oh, ow, factor](const std::vector<S>& g) {
        auto& gx = xi->grad_buffer();
        for (std::int64_t p = 0; p < nc; ++p)
          for (std::int64_t i = 0; i < oh; ++i)
            for (std::int64_t j = 0; j < ow; ++j) gx[(p * h + i / factor) * w + j / factor] += g[(p * oh + i) * ow + j];
      });
}

/// Non-overlapping average pooling with window and stride `k`.
template <class S>
BasicTensor<S> avg_pool2d(const BasicTensor<S>& x, int k) {
  detail::require_rank("avg_pool2d", x, 4, "input");
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k < 1 || h % k != 0 || w % k != 0) {
    detail::shape_error("avg_pool2d", "window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  const std::int64_t oh = h / k, ow = w / k;
  const S inv = S(1) / static_cast<S>(k * k);
  std::vector<S> y(static_cast<std::size_t>(nc * oh * ow), S(0));
  for (std::int64_t p = 0; p < nc; ++p)
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) y[(p * oh + i / k) * ow + j / k] += x[(p * h + i) * w + j] * inv;
  auto xi = x.impl();
  return detail::make_result<S>(
      "avg_pool2d", Shape{x.dim(0), x.dim(1), oh, ow}, std::move(y), {&x}, [xi, nc, h, w, oh, ow, k, inv](const std::vector<S>& g) {
        auto& gx = xi->grad_buffer();
        for (std::int64_t p = 0; p < nc; ++p)
          for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) gx[(p * h + i) * w + j] += g[(p * oh + i / k) * ow + j / k] * inv;
      });
}

}  // namespace latentlens
