#pragma once

#include <cmath>

#include "mde/nn_ops.hpp"
#include "mde/tensor.hpp"

namespace mde {

/// Constants of the composite training loss. The SSIM stabilizers default to
/// c1 = (0.01 L)^2 and c2 = (0.03 L)^2 with L the dynamic range of the
/// transformed-depth values.
struct LossConfig {
  double lambda = 0.1;        // weight on the L1 term
  int ssim_window = 7;        // odd, uniform window
  double dynamic_range = 10.0;
  double ssim_c1 = 0.01;      // (0.01 * 10)^2
  double ssim_c2 = 0.09;      // (0.03 * 10)^2
  double max_depth = 10.0;    // meters
  double min_depth = 1.0;     // meters

  static LossConfig with_dynamic_range(double range) {
    LossConfig cfg;
    cfg.dynamic_range = range;
    cfg.ssim_c1 = (0.01 * range) * (0.01 * range);
    cfg.ssim_c2 = (0.03 * range) * (0.03 * range);
    return cfg;
  }

  void validate() const {
    if (lambda < 0) throw ConfigError("loss: lambda must be >= 0");
    if (ssim_window < 3 || ssim_window % 2 == 0)
      throw ConfigError("loss: ssim_window must be odd and >= 3");
    if (!(ssim_c1 > 0) || !(ssim_c2 > 0)) throw ConfigError("loss: SSIM constants must be positive");
    if (!(max_depth > 0) || !(min_depth > 0) || min_depth > max_depth)
      throw ConfigError("loss: depth range must satisfy 0 < min_depth <= max_depth");
  }
};

/// Per-term values of the composite loss, kept as scalar tensors so the
/// total stays differentiable.
template <typename T>
struct LossBreakdown {
  Tensor<T> l1;
  Tensor<T> l1_grad;
  Tensor<T> l_ssim;
  Tensor<T> total;
};

/// Mean absolute difference over all elements.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& y, const Tensor<T>& yhat) {
  detail::check_same_shape(y, yhat, "l1_loss");
  return mean(abs(sub(y, yhat)));
}

/// L1 over forward-difference image gradients: mean |g_x(y) - g_x(yhat)| +
/// mean |g_y(y) - g_y(yhat)|, each averaged over every valid difference.
template <typename T>
Tensor<T> grad_loss(const Tensor<T>& y, const Tensor<T>& yhat) {
  detail::check_same_shape(y, yhat, "grad_loss");
  detail::require_rank4(y, "grad_loss");
  if (y.dim(2) < 2 || y.dim(3) < 2)
    throw ShapeError("grad_loss: spatial extents must be >= 2, got " + shape_str(y.shape()));
  auto gx = mean(abs(sub(diff_x(y), diff_x(yhat))));
  auto gy = mean(abs(sub(diff_y(y), diff_y(yhat))));
  return add(gx, gy);
}

/// Windowed SSIM: local means/variances/covariance over a uniform
/// window x window box at valid positions only (no padding), combined with
/// the stabilizers c1, c2, then averaged over positions and batch.
template <typename T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, const LossConfig& cfg) {
  detail::check_same_shape(x, y, "ssim");
  detail::require_rank4(x, "ssim");
  cfg.validate();
  const std::size_t w = std::size_t(cfg.ssim_window);
  if (x.dim(2) < w || x.dim(3) < w)
    throw ShapeError("ssim: window " + std::to_string(w) + " larger than image " +
                     shape_str(x.shape()));

  auto mu_x = avg_pool2d(x, w, 1);
  auto mu_y = avg_pool2d(y, w, 1);
  auto e_xx = avg_pool2d(mul(x, x), w, 1);
  auto e_yy = avg_pool2d(mul(y, y), w, 1);
  auto e_xy = avg_pool2d(mul(x, y), w, 1);
  auto var_x = sub(e_xx, mul(mu_x, mu_x));
  auto var_y = sub(e_yy, mul(mu_y, mu_y));
  auto cov = sub(e_xy, mul(mu_x, mu_y));

  const T c1 = T(cfg.ssim_c1), c2 = T(cfg.ssim_c2);
  auto num = mul(add_scalar(mul_scalar(mul(mu_x, mu_y), T(2)), c1),
                 add_scalar(mul_scalar(cov, T(2)), c2));
  auto den = mul(add_scalar(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), c1),
                 add_scalar(add(var_x, var_y), c2));
  return mean(div(num, den));
}

/// L_SSIM = (1 - SSIM) / 2, in [0, 1].
template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& x, const Tensor<T>& y, const LossConfig& cfg) {
  return mul_scalar(add_scalar(mul_scalar(ssim(x, y, cfg), T(-1)), T(1)), T(0.5));
}

/// Composite loss L = lambda * L1 + L1_grad + L_SSIM on transformed-depth
/// inputs. An optional validity mask (1 valid, 0 hole) removes invalid
/// pixels from every term: the prediction is replaced by the target there,
/// so holes contribute neither loss nor gradient.
template <typename T>
LossBreakdown<T> composite_loss(const Tensor<T>& y, const Tensor<T>& yhat,
                                const LossConfig& cfg, const Tensor<T>& mask = {}) {
  detail::check_same_shape(y, yhat, "composite_loss");
  cfg.validate();
  Tensor<T> pred = yhat;
  if (mask.defined()) {
    detail::check_same_shape(y, mask, "composite_loss mask");
    auto inv_mask = add_scalar(mul_scalar(mask, T(-1)), T(1));
    pred = add(mul(yhat, mask), mul(y, inv_mask));
  }
  LossBreakdown<T> b;
  b.l1 = l1_loss(y, pred);
  b.l1_grad = grad_loss(y, pred);
  b.l_ssim = ssim_loss(y, pred, cfg);
  b.total = add(add(mul_scalar(b.l1, T(cfg.lambda)), b.l1_grad), b.l_ssim);
  return b;
}

}  // namespace mde
