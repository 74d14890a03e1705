#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mde/losses.hpp"
#include "mde/network.hpp"
#include "mde/nn_ops.hpp"
#include "mde/random.hpp"
#include "mde/tensor.hpp"

namespace mde {

/// Central finite differences against reverse-mode gradients, in 64-bit.
/// `make_loss` must rebuild the scalar loss from the leaves on every call.
/// Elements are checked with step h = h_scale * max(1, |x|). The relative
/// error denominator is floored at the finite-difference noise level
/// (machine epsilon times |loss| divided by h, with margin): a central
/// difference cannot resolve gradients below that, so tinier gradients are
/// compared absolutely against it rather than amplified into false alarms.
inline double fd_max_rel_error(std::vector<Tensor<double>>& leaves,
                               const std::function<Tensor<double>()>& make_loss,
                               std::size_t max_elems_per_leaf = 0, double corrupt = 0.0,
                               double h_scale = 1e-4) {
  for (auto& l : leaves) {
    l.zero_grad();
    if (!l.requires_grad()) l.set_requires_grad(true);
  }
  auto loss0 = make_loss();
  const double f0 = std::abs(loss0.item());
  backward(loss0);
  const double eps = std::numeric_limits<double>::epsilon();
  const double denom_floor = std::max(1e-8, 1e5 * eps * std::max(1.0, f0) / h_scale);

  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    std::vector<double> g(l.size(), 0.0);
    if (l.has_grad()) {
      auto gs = l.grad();
      g.assign(gs.begin(), gs.end());
    }
    analytic.push_back(std::move(g));
  }
  if (corrupt != 0.0 && !analytic.empty() && !analytic[0].empty()) analytic[0][0] += corrupt;

  double max_err = 0.0;
  NoGrad ng;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto v = leaves[k].values();
    const std::size_t n = v.size();
    const std::size_t stride =
        (max_elems_per_leaf == 0 || n <= max_elems_per_leaf) ? 1 : (n / max_elems_per_leaf);
    for (std::size_t i = 0; i < n; i += stride) {
      const double x0 = v[i];
      const double h = h_scale * std::max(1.0, std::abs(x0));
      v[i] = x0 + h;
      const double f1 = make_loss().item();
      v[i] = x0 - h;
      const double f2 = make_loss().item();
      v[i] = x0;
      const double fd = (f1 - f2) / (2 * h);
      const double a = analytic[k][i];
      if (std::abs(fd) < denom_floor && std::abs(a) < denom_floor) continue;
      const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), denom_floor});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

struct GradCheckEntry {
  std::string op;
  double max_rel_err = 0;
  int instances = 0;
  bool pass = false;
};

struct GradCheckOptions {
  std::uint64_t seed = 42;
  int instances = 100;
  double tolerance = 1e-4;
  std::string corrupt_op;  // test-harness hook: perturb this op's gradient
};

namespace detail {

inline Tensor<double> random_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  auto t = Tensor<double>::leaf(std::move(shape), true);
  fill_uniform<double>(rng, t.values(), lo, hi);
  return t;
}

/// Values pushed away from zero (for kinked ops: relu, abs).
inline Tensor<double> random_leaf_away_from_zero(Rng& rng, Shape shape, double margin = 1e-2) {
  auto t = random_leaf(rng, std::move(shape));
  for (auto& x : t.values())
    if (std::abs(x) < margin) x = x < 0 ? x - margin : x + margin;
  return t;
}

/// Globally distinct values with pairwise gaps well above the FD step, so
/// max-pool argmaxes cannot flip under perturbation.
inline Tensor<double> random_leaf_distinct(Rng& rng, Shape shape) {
  auto t = Tensor<double>::leaf(std::move(shape), true);
  auto v = t.values();
  std::vector<double> lattice(v.size());
  for (std::size_t i = 0; i < lattice.size(); ++i) lattice[i] = 0.05 * double(i);
  shuffle<double>(rng, lattice);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = lattice[i];
  return t;
}

}  // namespace detail

/// Runs the finite-difference suite over every differentiable op and the
/// composite loss through a toy network. One entry per op.
inline std::vector<GradCheckEntry> run_gradcheck(const GradCheckOptions& opts = {}) {
  std::vector<GradCheckEntry> report;

  double current_corrupt = 0.0;  // test-harness hook, see GradCheckOptions
  auto run_op = [&](const std::string& name, int instances,
                    const std::function<double(Rng&)>& instance) {
    GradCheckEntry e;
    e.op = name;
    e.instances = instances;
    current_corrupt = (name == opts.corrupt_op) ? 1e-2 : 0.0;
    for (int i = 0; i < instances; ++i) {
      Rng rng(mix_seed(opts.seed, std::hash<std::string>{}(name), std::uint64_t(i)));
      e.max_rel_err = std::max(e.max_rel_err, instance(rng));
    }
    e.pass = e.max_rel_err <= opts.tolerance;
    report.push_back(e);
  };

  const Shape ew{2, 3, 4, 4};  // elementwise test shape

  // Weighted-sum readout with weights frozen per instance: a plain sum could
  // hide gradient errors that cancel across elements.
  auto frozen_weights = [](Rng& rng, const Shape& shape) {
    auto w = Tensor<double>::leaf(shape);
    fill_uniform<double>(rng, w.values(), -1.0, 1.0);
    return w;
  };

  auto check_unary = [&](std::vector<Tensor<double>> leaves,
                         std::function<Tensor<double>()> op, Rng& rng) {
    Tensor<double> w;
    {
      NoGrad ng;
      w = frozen_weights(rng, op().shape());
    }
    return fd_max_rel_error(leaves, [op = std::move(op), w] { return sum(mul(op(), w)); }, 0,
                            current_corrupt);
  };

  run_op("add", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, ew), b = detail::random_leaf(rng, ew);
    return check_unary({a, b}, [a, b] { return add(a, b); }, rng);
  });
  run_op("sub", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, ew), b = detail::random_leaf(rng, ew);
    return check_unary({a, b}, [a, b] { return sub(a, b); }, rng);
  });
  run_op("mul", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, ew), b = detail::random_leaf(rng, ew);
    return check_unary({a, b}, [a, b] { return mul(a, b); }, rng);
  });
  run_op("div", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, ew);
    auto b = detail::random_leaf(rng, ew);
    for (auto& x : b.values()) x = (x < 0 ? -1.0 : 1.0) * (0.5 + std::abs(x));
    return check_unary({a, b}, [a, b] { return div(a, b); }, rng);
  });
  run_op("abs", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf_away_from_zero(rng, ew);
    return check_unary({a}, [a] { return abs(a); }, rng);
  });
  run_op("relu", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf_away_from_zero(rng, ew);
    return check_unary({a}, [a] { return relu(a); }, rng);
  });
  run_op("softplus", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, ew, -3.0, 3.0);
    return check_unary({a}, [a] { return softplus(a); }, rng);
  });
  run_op("sum", opts.instances, [&](Rng& rng) {
    std::vector<Tensor<double>> leaves{detail::random_leaf(rng, ew)};
    auto a = leaves[0];
    return fd_max_rel_error(leaves, [a] { return sum(a); }, 0, current_corrupt);
  });
  run_op("mean", opts.instances, [&](Rng& rng) {
    std::vector<Tensor<double>> leaves{detail::random_leaf(rng, ew)};
    auto a = leaves[0];
    return fd_max_rel_error(leaves, [a] { return mean(a); }, 0, current_corrupt);
  });
  run_op("concat_channels", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, {2, 2, 3, 3}), b = detail::random_leaf(rng, {2, 3, 3, 3});
    return check_unary({a, b}, [a, b] { return concat_channels(a, b); }, rng);
  });
  run_op("diff_x", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, {1, 2, 4, 5});
    return check_unary({a}, [a] { return diff_x(a); }, rng);
  });
  run_op("diff_y", opts.instances, [&](Rng& rng) {
    auto a = detail::random_leaf(rng, {1, 2, 5, 4});
    return check_unary({a}, [a] { return diff_y(a); }, rng);
  });
  run_op("conv2d", opts.instances, [&](Rng& rng) {
    std::uniform_int_distribution<int> k_dist{1, 3}, s_dist{1, 2}, p_dist{0, 1}, c_dist{1, 3};
    const std::size_t kh = std::size_t(k_dist(rng));
    const std::size_t stride = std::size_t(s_dist(rng));
    const std::size_t pad = std::size_t(p_dist(rng));
    const std::size_t cin = std::size_t(c_dist(rng)), cout = std::size_t(c_dist(rng));
    auto x = detail::random_leaf(rng, {2, cin, 6, 6});
    auto w = detail::random_leaf(rng, {cout, cin, kh, kh});
    auto b = detail::random_leaf(rng, {cout});
    return check_unary({x, w, b}, [=] { return conv2d(x, w, b, stride, pad); }, rng);
  });
  run_op("batch_norm", opts.instances, [&](Rng& rng) {
    auto x = detail::random_leaf(rng, {3, 2, 4, 4});
    auto gamma = detail::random_leaf(rng, {2}, 0.5, 1.5);
    auto beta = detail::random_leaf(rng, {2});
    // fresh state per evaluation: running stats do not affect train-mode output
    return check_unary({x, gamma, beta},
                       [=] {
                         BatchNormState<double> state;
                         return batch_norm(x, gamma, beta, state, BnMode::train);
                       },
                       rng);
  });
  run_op("avg_pool2d", opts.instances, [&](Rng& rng) {
    std::uniform_int_distribution<int> k_dist{1, 3}, s_dist{1, 2};
    const std::size_t k = std::size_t(k_dist(rng)), stride = std::size_t(s_dist(rng));
    auto x = detail::random_leaf(rng, {2, 2, 6, 6});
    return check_unary({x}, [=] { return avg_pool2d(x, k, stride); }, rng);
  });
  run_op("max_pool2d", opts.instances, [&](Rng& rng) {
    auto x = detail::random_leaf_distinct(rng, {2, 2, 6, 6});
    return check_unary({x}, [=] { return max_pool2d(x, 2, 2); }, rng);
  });
  run_op("bilinear_upsample2x", opts.instances, [&](Rng& rng) {
    auto x = detail::random_leaf(rng, {1, 2, 4, 5});
    return check_unary({x}, [=] { return bilinear_upsample2x(x); }, rng);
  });

  // Full composite loss through a toy network: every parameter tensor is
  // checked (large tensors on an evenly spaced subset of elements).
  //
  // relu/abs make the loss piecewise-smooth, so instances whose activations
  // land within 1e-4 of a kink are redrawn — the same away-from-kink rule the
  // elementary relu/abs checks apply to their inputs, just detected after the
  // fact because activations cannot be chosen directly. The finite-difference
  // step is shrunk to 1e-5 for a 10x safety margin against crossing.
  run_op("composite_loss_toy_network", 2, [&](Rng& rng) {
    LossConfig loss_cfg;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 64)
        throw StateError("gradcheck: no kink-free composite instance in 64 draws");
      NetworkConfig cfg = NetworkConfig::preset("toy");
      std::uniform_int_distribution<std::uint64_t> seed_dist;
      cfg.seed = seed_dist(rng);
      auto net = Network<double>::build(cfg);
      auto image = Tensor<double>::leaf({1, 3, 16, 16});
      fill_uniform<double>(rng, image.values(), 0.0, 1.0);
      auto target = Tensor<double>::leaf({1, 1, 8, 8});
      fill_uniform<double>(rng, target.values(), 1.0, 10.0);
      auto make_loss = [&net, image, target, &loss_cfg] {
        return composite_loss(target, net.forward(image, BnMode::train), loss_cfg).total;
      };
      {
        NoGrad ng;
        detail::kink_band = 1e-4;
        detail::kink_hits = 0;
        detail::bn_min_batch_var = 1e300;
        (void)make_loss().item();
        const bool reject = detail::kink_hits > 0 || detail::bn_min_batch_var < 1e-2;
        detail::kink_band = 1e-9;
        if (reject) continue;
      }
      std::vector<Tensor<double>> leaves;
      for (auto& [name, p] : net.parameters()) leaves.push_back(p);
      return fd_max_rel_error(leaves, make_loss, 32, current_corrupt, 1e-5);
    }
  });

  return report;
}

}  // namespace mde
