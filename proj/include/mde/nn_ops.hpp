#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mde/tensor.hpp"

namespace mde {

namespace detail {

// Smallest per-channel batch variance seen by train-mode batch_norm on this
// thread. Gradient-check harnesses reset and read it to reject
// ill-conditioned instances (a near-constant channel makes 1/sqrt(var + eps)
// a huge perturbation amplifier, which breaks finite differences).
inline thread_local double bn_min_batch_var = 1e300;

}  // namespace detail

/// 2-D cross-correlation (no kernel flip), zero padding.
/// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], optional bias [Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank4(input, "conv2d");
  detail::require_rank4(weight, "conv2d");
  const Shape& si = input.shape();
  const Shape& sw = weight.shape();
  const std::size_t N = si[0], Cin = si[1], H = si[2], W = si[3];
  const std::size_t Cout = sw[0], kh = sw[2], kw = sw[3];
  if (sw[1] != Cin)
    throw ConfigError("conv2d: input channels " + std::to_string(Cin) +
                      " do not match weight channels " + std::to_string(sw[1]));
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (kh > H + 2 * padding || kw > W + 2 * padding)
    throw ShapeError("conv2d: kernel " + shape_str(sw) + " larger than padded input " + shape_str(si));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout))
    throw ShapeError("conv2d: bias shape must be [" + std::to_string(Cout) + "]");

  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  auto out = detail::make_result<T>(Shape{N, Cout, Ho, Wo});

  auto xv = input.values();
  auto wv = weight.values();
  auto ov = out.values();
  const T* bp = bias.defined() ? bias.values().data() : nullptr;

  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t ho = 0; ho < Ho; ++ho)
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          T acc = bp ? bp[co] : T(0);
          const std::ptrdiff_t h0 = std::ptrdiff_t(ho * stride) - std::ptrdiff_t(padding);
          const std::ptrdiff_t w0 = std::ptrdiff_t(wo * stride) - std::ptrdiff_t(padding);
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t i = 0; i < kh; ++i) {
              const std::ptrdiff_t h = h0 + std::ptrdiff_t(i);
              if (h < 0 || h >= std::ptrdiff_t(H)) continue;
              const T* xrow = xv.data() + ((n * Cin + ci) * H + h) * W;
              const T* wrow = wv.data() + ((co * Cin + ci) * kh + i) * kw;
              for (std::size_t j = 0; j < kw; ++j) {
                const std::ptrdiff_t w = w0 + std::ptrdiff_t(j);
                if (w < 0 || w >= std::ptrdiff_t(W)) continue;
                acc += xrow[w] * wrow[j];
              }
            }
          ov[((n * Cout + co) * Ho + ho) * Wo + wo] = acc;
        }

  auto xn = input.node();
  auto wn = weight.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> parents{input, weight};
  if (bias.defined()) parents.push_back(bias);
  detail::attach<T>(out, parents,
                    [xn, wn, bn, N, Cin, Cout, H, W, kh, kw, Ho, Wo, stride, padding](auto& node) {
    if (xn->tracked) xn->ensure_grad();
    if (wn->tracked) wn->ensure_grad();
    if (bn && bn->tracked) bn->ensure_grad();
    const auto& g = node.grad;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t ho = 0; ho < Ho; ++ho)
          for (std::size_t wo = 0; wo < Wo; ++wo) {
            const T go = g[((n * Cout + co) * Ho + ho) * Wo + wo];
            if (go == T(0)) continue;
            if (bn && bn->tracked) bn->grad[co] += go;
            const std::ptrdiff_t h0 = std::ptrdiff_t(ho * stride) - std::ptrdiff_t(padding);
            const std::ptrdiff_t w0 = std::ptrdiff_t(wo * stride) - std::ptrdiff_t(padding);
            for (std::size_t ci = 0; ci < Cin; ++ci)
              for (std::size_t i = 0; i < kh; ++i) {
                const std::ptrdiff_t h = h0 + std::ptrdiff_t(i);
                if (h < 0 || h >= std::ptrdiff_t(H)) continue;
                for (std::size_t j = 0; j < kw; ++j) {
                  const std::ptrdiff_t w = w0 + std::ptrdiff_t(j);
                  if (w < 0 || w >= std::ptrdiff_t(W)) continue;
                  const std::size_t xi = ((n * Cin + ci) * H + h) * W + w;
                  const std::size_t wi = ((co * Cin + ci) * kh + i) * kw + j;
                  if (xn->tracked) xn->grad[xi] += go * wn->value[wi];
                  if (wn->tracked) wn->grad[wi] += go * xn->value[xi];
                }
              }
          }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 std::size_t stride = 1, std::size_t padding = 0) {
  return conv2d(input, weight, Tensor<T>{}, stride, padding);
}

namespace detail {

template <typename T>
void check_pool(const Tensor<T>& input, std::size_t k, std::size_t stride,
                std::size_t padding, const char* op) {
  require_rank4(input, op);
  if (k == 0 || stride == 0) throw ConfigError(std::string(op) + ": window and stride must be positive");
  const Shape& s = input.shape();
  if (k > s[2] + 2 * padding || k > s[3] + 2 * padding)
    throw ShapeError(std::string(op) + ": window " + std::to_string(k) +
                     " does not fit padded input " + shape_str(s));
}

}  // namespace detail

/// Average pooling over k x k windows (zero padding). Backward distributes
/// the gradient uniformly over the window.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t k, std::size_t stride,
                     std::size_t padding = 0) {
  detail::check_pool(input, k, stride, padding, "avg_pool2d");
  const Shape& s = input.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  auto out = detail::make_result<T>(Shape{N, C, Ho, Wo});
  auto xv = input.values();
  auto ov = out.values();
  const T inv = T(1) / T(k * k);
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t ho = 0; ho < Ho; ++ho)
      for (std::size_t wo = 0; wo < Wo; ++wo) {
        T acc = T(0);
        const std::ptrdiff_t h0 = std::ptrdiff_t(ho * stride) - std::ptrdiff_t(padding);
        const std::ptrdiff_t w0 = std::ptrdiff_t(wo * stride) - std::ptrdiff_t(padding);
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t h = h0 + std::ptrdiff_t(i);
          if (h < 0 || h >= std::ptrdiff_t(H)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t w = w0 + std::ptrdiff_t(j);
            if (w < 0 || w >= std::ptrdiff_t(W)) continue;
            acc += xv[(p * H + h) * W + w];
          }
        }
        ov[(p * Ho + ho) * Wo + wo] = acc * inv;
      }
  auto xn = input.node();
  detail::attach<T>(out, {input}, [xn, N, C, H, W, Ho, Wo, k, stride, padding, inv](auto& node) {
    xn->ensure_grad();
    for (std::size_t p = 0; p < N * C; ++p)
      for (std::size_t ho = 0; ho < Ho; ++ho)
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          const T g = node.grad[(p * Ho + ho) * Wo + wo] * inv;
          const std::ptrdiff_t h0 = std::ptrdiff_t(ho * stride) - std::ptrdiff_t(padding);
          const std::ptrdiff_t w0 = std::ptrdiff_t(wo * stride) - std::ptrdiff_t(padding);
          for (std::size_t i = 0; i < k; ++i) {
            const std::ptrdiff_t h = h0 + std::ptrdiff_t(i);
            if (h < 0 || h >= std::ptrdiff_t(H)) continue;
            for (std::size_t j = 0; j < k; ++j) {
              const std::ptrdiff_t w = w0 + std::ptrdiff_t(j);
              if (w < 0 || w >= std::ptrdiff_t(W)) continue;
              xn->grad[(p * H + h) * W + w] += g;
            }
          }
        }
  });
  return out;
}

/// Max pooling over k x k windows. Padded positions are treated as absent,
/// never as zeros. Ties break to the first window index in scan order; the
/// backward pass routes the gradient to that element only.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t k, std::size_t stride,
                     std::size_t padding = 0) {
  detail::check_pool(input, k, stride, padding, "max_pool2d");
  const Shape& s = input.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  auto out = detail::make_result<T>(Shape{N, C, Ho, Wo});
  auto xv = input.values();
  auto ov = out.values();
  auto argmax = std::make_shared<std::vector<std::size_t>>(ov.size());
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t ho = 0; ho < Ho; ++ho)
      for (std::size_t wo = 0; wo < Wo; ++wo) {
        bool first = true;
        T best = T(0);
        std::size_t best_idx = 0;
        const std::ptrdiff_t h0 = std::ptrdiff_t(ho * stride) - std::ptrdiff_t(padding);
        const std::ptrdiff_t w0 = std::ptrdiff_t(wo * stride) - std::ptrdiff_t(padding);
        for (std::size_t i = 0; i < k; ++i) {
          const std::ptrdiff_t h = h0 + std::ptrdiff_t(i);
          if (h < 0 || h >= std::ptrdiff_t(H)) continue;
          for (std::size_t j = 0; j < k; ++j) {
            const std::ptrdiff_t w = w0 + std::ptrdiff_t(j);
            if (w < 0 || w >= std::ptrdiff_t(W)) continue;
            const std::size_t idx = (p * H + h) * W + w;
            if (first || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
              first = false;
            }
          }
        }
        const std::size_t oi = (p * Ho + ho) * Wo + wo;
        ov[oi] = best;
        (*argmax)[oi] = best_idx;
      }
  auto xn = input.node();
  detail::attach<T>(out, {input}, [xn, argmax](auto& node) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i)
      xn->grad[(*argmax)[i]] += node.grad[i];
  });
  return out;
}

namespace detail {

struct LerpCoord {
  std::size_t i0, i1;
  double f;  // weight of i1
};

inline std::vector<LerpCoord> upsample2x_coords(std::size_t src) {
  std::vector<LerpCoord> m(src * 2);
  for (std::size_t d = 0; d < src * 2; ++d) {
    double s = (double(d) + 0.5) / 2.0 - 0.5;
    if (s < 0) s = 0;
    if (s > double(src - 1)) s = double(src - 1);
    std::size_t i0 = std::size_t(std::floor(s));
    std::size_t i1 = std::min(i0 + 1, src - 1);
    m[d] = {i0, i1, s - double(i0)};
  }
  return m;
}

}  // namespace detail

/// 2x bilinear upsampling with the half-pixel convention: source coordinate
/// = (dst + 0.5)/2 - 0.5, clamped to the borders.
template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& input) {
  detail::require_rank4(input, "bilinear_upsample2x");
  const Shape& s = input.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  auto hm = detail::upsample2x_coords(H);
  auto wm = detail::upsample2x_coords(W);
  auto out = detail::make_result<T>(Shape{N, C, 2 * H, 2 * W});
  auto xv = input.values();
  auto ov = out.values();
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* x = xv.data() + p * H * W;
    T* o = ov.data() + p * 4 * H * W;
    for (std::size_t h = 0; h < 2 * H; ++h)
      for (std::size_t w = 0; w < 2 * W; ++w) {
        const auto& ch = hm[h];
        const auto& cw = wm[w];
        const T v00 = x[ch.i0 * W + cw.i0], v01 = x[ch.i0 * W + cw.i1];
        const T v10 = x[ch.i1 * W + cw.i0], v11 = x[ch.i1 * W + cw.i1];
        const T fh = T(ch.f), fw = T(cw.f);
        o[h * 2 * W + w] = (T(1) - fh) * ((T(1) - fw) * v00 + fw * v01) +
                           fh * ((T(1) - fw) * v10 + fw * v11);
      }
  }
  auto xn = input.node();
  detail::attach<T>(out, {input}, [xn, hm, wm, N, C, H, W](auto& node) {
    xn->ensure_grad();
    for (std::size_t p = 0; p < N * C; ++p) {
      T* gx = xn->grad.data() + p * H * W;
      const T* go = node.grad.data() + p * 4 * H * W;
      for (std::size_t h = 0; h < 2 * H; ++h)
        for (std::size_t w = 0; w < 2 * W; ++w) {
          const auto& ch = hm[h];
          const auto& cw = wm[w];
          const T g = go[h * 2 * W + w];
          const T fh = T(ch.f), fw = T(cw.f);
          gx[ch.i0 * W + cw.i0] += g * (T(1) - fh) * (T(1) - fw);
          gx[ch.i0 * W + cw.i1] += g * (T(1) - fh) * fw;
          gx[ch.i1 * W + cw.i0] += g * fh * (T(1) - fw);
          gx[ch.i1 * W + cw.i1] += g * fh * fw;
        }
    }
  });
  return out;
}

enum class BnMode { train, eval };

/// Per-channel running statistics for batch normalization. Starts at the
/// conventional (mean 0, var 1) point and is updated by exponential moving
/// average during training-mode forward passes.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;

  void reset(std::size_t channels) {
    running_mean.assign(channels, T(0));
    running_var.assign(channels, T(1));
    initialized = false;
  }
};

/// Batch normalization over N,H,W per channel. Training mode normalizes by
/// batch statistics (population variance) and updates the running stats;
/// eval mode uses the running stats. Affine transform by gamma/beta.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, BnMode mode, T momentum = T(0.1),
                     T epsilon = T(1e-5)) {
  detail::require_rank4(input, "batch_norm");
  if (!(epsilon > T(0))) throw ConfigError("batch_norm: epsilon must be positive");
  const Shape& s = input.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (gamma.size() != C || beta.size() != C)
    throw ShapeError("batch_norm: gamma/beta must have " + std::to_string(C) + " elements");
  if (state.running_mean.size() != C) state.reset(C);
  if (mode == BnMode::eval && !state.initialized)
    throw StateError("batch_norm: eval mode requires initialized running statistics");

  const std::size_t plane = H * W;
  const std::size_t M = N * plane;  // elements per channel
  auto mean_c = std::make_shared<std::vector<T>>(C);
  auto invstd_c = std::make_shared<std::vector<T>>(C);
  auto xv = input.values();

  if (mode == BnMode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      T m = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* x = xv.data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) m += x[i];
      }
      m /= T(M);
      T var = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* x = xv.data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = x[i] - m;
          var += d * d;
        }
      }
      var /= T(M);
      if (double(var) < detail::bn_min_batch_var) detail::bn_min_batch_var = double(var);
      (*mean_c)[c] = m;
      (*invstd_c)[c] = T(1) / std::sqrt(var + epsilon);
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * m;
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * var;
    }
    state.initialized = true;
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      (*mean_c)[c] = state.running_mean[c];
      (*invstd_c)[c] = T(1) / std::sqrt(state.running_var[c] + epsilon);
    }
  }

  auto out = detail::make_result<T>(s);
  auto ov = out.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* x = xv.data() + (n * C + c) * plane;
      T* o = ov.data() + (n * C + c) * plane;
      const T m = (*mean_c)[c], is = (*invstd_c)[c], ga = gv[c], be = bv[c];
      for (std::size_t i = 0; i < plane; ++i) o[i] = (x[i] - m) * is * ga + be;
    }

  auto xn = input.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  const bool train = mode == BnMode::train;
  detail::attach<T>(out, {input, gamma, beta},
                    [xn, gn, bn, mean_c, invstd_c, N, C, plane, M, train](auto& node) {
    if (xn->tracked) xn->ensure_grad();
    if (gn->tracked) gn->ensure_grad();
    if (bn->tracked) bn->ensure_grad();
    for (std::size_t c = 0; c < C; ++c) {
      const T m = (*mean_c)[c], is = (*invstd_c)[c], ga = gn->value[c];
      // channel-wide reductions of dy and dy * xhat
      T sum_g = T(0), sum_gx = T(0);
      for (std::size_t n = 0; n < N; ++n) {
        const T* g = node.grad.data() + (n * C + c) * plane;
        const T* x = xn->value.data() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_g += g[i];
          sum_gx += g[i] * (x[i] - m) * is;
        }
      }
      if (gn->tracked) gn->grad[c] += sum_gx;
      if (bn->tracked) bn->grad[c] += sum_g;
      if (!xn->tracked) continue;
      for (std::size_t n = 0; n < N; ++n) {
        const T* g = node.grad.data() + (n * C + c) * plane;
        const T* x = xn->value.data() + (n * C + c) * plane;
        T* gx = xn->grad.data() + (n * C + c) * plane;
        if (train) {
          const T invM = T(1) / T(M);
          for (std::size_t i = 0; i < plane; ++i) {
            const T xhat = (x[i] - m) * is;
            gx[i] += ga * is * (g[i] - invM * sum_g - xhat * invM * sum_gx);
          }
        } else {
          for (std::size_t i = 0; i < plane; ++i) gx[i] += ga * is * g[i];
        }
      }
    }
  });
  return out;
}

}  // namespace mde
