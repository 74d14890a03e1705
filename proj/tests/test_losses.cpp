#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mde/depth_map.hpp"
#include "mde/losses.hpp"
#include "mde/random.hpp"

using namespace mde;
using Catch::Approx;

namespace {

Tensor<double> nchw(Shape s, std::vector<double> v, bool rg = false) {
  return Tensor<double>::from(std::move(s), std::move(v), rg);
}

/// Naive per-window double-loop SSIM oracle: means, population variances and
/// covariance computed independently at every valid window position.
double ssim_oracle(const Tensor<double>& x, const Tensor<double>& y, const LossConfig& cfg) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t w = std::size_t(cfg.ssim_window);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r0 = 0; r0 + w <= H; ++r0)
        for (std::size_t c0 = 0; c0 + w <= W; ++c0) {
          double mx = 0, my = 0;
          for (std::size_t i = 0; i < w; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              mx += x.at4(n, c, r0 + i, c0 + j);
              my += y.at4(n, c, r0 + i, c0 + j);
            }
          const double m = double(w * w);
          mx /= m;
          my /= m;
          double vx = 0, vy = 0, cov = 0;
          for (std::size_t i = 0; i < w; ++i)
            for (std::size_t j = 0; j < w; ++j) {
              const double dx = x.at4(n, c, r0 + i, c0 + j) - mx;
              const double dy = y.at4(n, c, r0 + i, c0 + j) - my;
              vx += dx * dx;
              vy += dy * dy;
              cov += dx * dy;
            }
          vx /= m;
          vy /= m;
          cov /= m;
          total += (2 * mx * my + cfg.ssim_c1) * (2 * cov + cfg.ssim_c2) /
                   ((mx * mx + my * my + cfg.ssim_c1) * (vx + vy + cfg.ssim_c2));
          ++count;
        }
  return total / double(count);
}

}  // namespace

TEST_CASE("l1_loss: [1,2,3] vs [2,2,5] averages to 1") {
  auto y = nchw({1, 1, 1, 3}, {1, 2, 3});
  auto yhat = nchw({1, 1, 1, 3}, {2, 2, 5});
  CHECK(l1_loss(y, yhat).item() == 1.0);
  CHECK(l1_loss(y, y).item() == 0.0);
  CHECK_THROWS_AS(l1_loss(y, nchw({1, 1, 1, 2}, {0, 0})), ShapeError);
}

TEST_CASE("grad_loss: vertical stripes vs zeros gives 1") {
  auto y = nchw({1, 1, 2, 2}, {0, 1, 0, 1});
  auto yhat = Tensor<double>({1, 1, 2, 2}, 0.0);
  CHECK(grad_loss(y, yhat).item() == 1.0);
}

TEST_CASE("grad_loss: constants and global shifts are invisible") {
  auto y = Tensor<double>({1, 1, 3, 3}, 2.0);
  auto yhat = Tensor<double>({1, 1, 3, 3}, 7.0);
  CHECK(grad_loss(y, yhat).item() == 0.0);

  Rng rng = make_rng(9);
  auto a = Tensor<double>::leaf({1, 1, 4, 4});
  fill_uniform<double>(rng, a.values(), 0.0, 1.0);
  auto shifted = add_scalar(a, 0.75);
  CHECK(grad_loss(a, shifted).item() == Approx(0.0).margin(1e-14));
}

TEST_CASE("grad_loss requires 2x2 spatial extents") {
  auto y = Tensor<double>({1, 1, 1, 4}, 0.0);
  CHECK_THROWS_AS(grad_loss(y, y), ShapeError);
}

TEST_CASE("ssim: identical inputs give 1, loss 0") {
  Rng rng = make_rng(21);
  auto x = Tensor<double>::leaf({1, 1, 8, 8});
  fill_uniform<double>(rng, x.values(), 1.0, 10.0);
  LossConfig cfg;
  CHECK(ssim(x, x, cfg).item() == Approx(1.0).margin(1e-12));
  CHECK(ssim_loss(x, x, cfg).item() == Approx(0.0).margin(1e-12));
}

TEST_CASE("ssim: constant 0 vs constant 1 frozen values") {
  LossConfig cfg;  // c1 = 0.01, c2 = 0.09 at dynamic range 10
  auto x = Tensor<double>({1, 1, 7, 7}, 0.0);
  auto y = Tensor<double>({1, 1, 7, 7}, 1.0);
  // num = c1 * c2, den = (1 + c1) * c2  =>  ssim = 0.01 / 1.01
  CHECK(ssim(x, y, cfg).item() == Approx(0.00990099009900990).epsilon(1e-12));
  CHECK(ssim_loss(x, y, cfg).item() == Approx(0.495049504950495).epsilon(1e-12));
}

TEST_CASE("ssim matches the double-loop oracle") {
  LossConfig cfg;
  cfg.ssim_window = 3;
  Rng rng = make_rng(33);
  for (int k = 0; k < 25; ++k) {
    auto x = Tensor<double>::leaf({1, 2, 8, 8});
    auto y = Tensor<double>::leaf({1, 2, 8, 8});
    fill_uniform<double>(rng, x.values(), 1.0, 10.0);
    fill_uniform<double>(rng, y.values(), 1.0, 10.0);
    CHECK(std::abs(ssim(x, y, cfg).item() - ssim_oracle(x, y, cfg)) < 1e-10);
  }
}

TEST_CASE("ssim stays in [-1, 1]; ssim_loss in [0, 1]") {
  LossConfig cfg;
  Rng rng = make_rng(55);
  for (int k = 0; k < 20; ++k) {
    auto x = Tensor<double>::leaf({1, 1, 9, 9});
    auto y = Tensor<double>::leaf({1, 1, 9, 9});
    fill_uniform<double>(rng, x.values(), 1.0, 10.0);
    fill_uniform<double>(rng, y.values(), 1.0, 10.0);
    const double s = ssim(x, y, cfg).item();
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
    const double l = ssim_loss(x, y, cfg).item();
    CHECK(l >= 0.0);
    CHECK(l <= 1.0);
  }
}

TEST_CASE("ssim validation") {
  LossConfig cfg;
  auto x = Tensor<double>({1, 1, 4, 4}, 0.0);
  CHECK_THROWS_AS(ssim(x, x, cfg), ShapeError);  // window 7 > 4x4 image
  LossConfig bad;
  bad.ssim_window = 4;
  auto y = Tensor<double>({1, 1, 8, 8}, 0.0);
  CHECK_THROWS_AS(ssim(y, y, bad), ConfigError);
}

TEST_CASE("with_dynamic_range recomputes the SSIM stabilizers") {
  auto cfg = LossConfig::with_dynamic_range(10.0);
  CHECK(cfg.ssim_c1 == Approx(0.01).epsilon(1e-15));
  CHECK(cfg.ssim_c2 == Approx(0.09).epsilon(1e-15));
  auto one = LossConfig::with_dynamic_range(1.0);
  CHECK(one.ssim_c1 == Approx(1e-4).epsilon(1e-12));
  CHECK(one.ssim_c2 == Approx(9e-4).epsilon(1e-12));
}

TEST_CASE("composite_loss: weighted term arithmetic and perfect-prediction zero") {
  LossConfig cfg;  // lambda = 0.1
  Rng rng = make_rng(77);
  auto y = Tensor<double>::leaf({1, 1, 8, 8});
  auto yhat = Tensor<double>::leaf({1, 1, 8, 8});
  fill_uniform<double>(rng, y.values(), 1.0, 10.0);
  fill_uniform<double>(rng, yhat.values(), 1.0, 10.0);

  auto b = composite_loss(y, yhat, cfg);
  CHECK(b.total.item() ==
        Approx(0.1 * b.l1.item() + b.l1_grad.item() + b.l_ssim.item()).epsilon(1e-12));
  // term values (1, 1, 0.5) must combine to 1.6 under the default weighting
  CHECK(0.1 * 1.0 + 1.0 + 0.5 == 1.6);

  auto perfect = composite_loss(y, y, cfg);
  CHECK(perfect.total.item() == Approx(0.0).margin(1e-12));
}

TEST_CASE("composite_loss mask removes pixels from loss and gradient") {
  LossConfig cfg;
  Rng rng = make_rng(88);
  auto y = Tensor<double>::leaf({1, 1, 8, 8});
  fill_uniform<double>(rng, y.values(), 1.0, 10.0);
  auto yhat = Tensor<double>::leaf({1, 1, 8, 8}, true);
  std::copy(y.values().begin(), y.values().end(), yhat.values().begin());
  yhat.values()[11] = 5.0;  // differ only at one pixel...
  auto mask = Tensor<double>({1, 1, 8, 8}, 1.0);
  mask.values()[11] = 0.0;  // ...which the mask marks invalid

  auto b = composite_loss(y, yhat, cfg, mask);
  CHECK(b.total.item() == Approx(0.0).margin(1e-12));
  backward(b.total);
  CHECK(yhat.grad()[11] == 0.0);
}

TEST_CASE("composite_loss mask shape must match") {
  LossConfig cfg;
  auto y = Tensor<double>({1, 1, 8, 8}, 2.0);
  auto mask = Tensor<double>({1, 1, 4, 4}, 1.0);
  CHECK_THROWS_AS(composite_loss(y, y, cfg, mask), ShapeError);
}

TEST_CASE("LossConfig validation") {
  LossConfig cfg;
  cfg.lambda = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.ssim_window = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.ssim_c2 = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.min_depth = 20;  // > max_depth
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("depth_transform: frozen examples at m = 10") {
  DepthMap d(1, 5);
  d.depth = {5.f, 10.f, 1.f, 0.5f, 20.f};
  auto t = depth_transform(d);
  CHECK(t.depth[0] == 2.0f);
  CHECK(t.depth[1] == 1.0f);
  CHECK(t.depth[2] == 10.0f);
  CHECK(t.depth[3] == 10.0f);  // clamped up to min_depth 1
  CHECK(t.depth[4] == 1.0f);   // clamped down to m
}

TEST_CASE("depth_transform leaves invalid pixels untouched") {
  DepthMap d(1, 2);
  d.depth = {0.f, 5.f};
  d.valid = {0, 1};
  auto t = depth_transform(d);
  CHECK(t.depth[0] == 0.0f);
  CHECK(t.valid[0] == 0);
  CHECK(t.depth[1] == 2.0f);
}

TEST_CASE("depth transform round-trips within 1e-6 relative") {
  Rng rng = make_rng(99);
  std::uniform_real_distribution<double> dist{1.0, 10.0};
  DepthMap d(4, 4);
  for (auto& v : d.depth) v = float(dist(rng));
  auto round = depth_untransform(depth_transform(d));
  for (std::size_t i = 0; i < d.size(); ++i)
    CHECK(std::abs(round.depth[i] - d.depth[i]) / d.depth[i] < 1e-6);
  // transform is its own inverse on [1, m]: m / (m / y) = y
  auto twice = depth_transform(depth_transform(d));
  for (std::size_t i = 0; i < d.size(); ++i)
    CHECK(std::abs(twice.depth[i] - d.depth[i]) / d.depth[i] < 1e-6);
}

TEST_CASE("depth_transform validation") {
  DepthMap d(1, 1);
  CHECK_THROWS_AS(depth_transform(d, -1.0), ConfigError);
  CHECK_THROWS_AS(depth_transform(d, 10.0, 0.0), ConfigError);
  CHECK_THROWS_AS(depth_untransform(d, 10.0, 20.0), ConfigError);
}
