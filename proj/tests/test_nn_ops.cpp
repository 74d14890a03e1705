#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mde/gradcheck.hpp"
#include "mde/nn_ops.hpp"
#include "mde/random.hpp"
#include "mde/tensor.hpp"

using namespace mde;
using Catch::Approx;

namespace {

Tensor<double> nchw(Shape s, std::vector<double> v, bool rg = false) {
  return Tensor<double>::from(std::move(s), std::move(v), rg);
}

std::vector<double> to_vec(const Tensor<double>& t) {
  auto v = t.values();
  return {v.begin(), v.end()};
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 input, all-ones 2x2 kernel gives 4 everywhere") {
  auto x = Tensor<double>({1, 1, 3, 3}, 1.0);
  auto w = Tensor<double>({1, 1, 2, 2}, 1.0);
  auto y = conv2d(x, w);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.values()) CHECK(v == 4.0);
}

TEST_CASE("conv2d: identity kernels reproduce the input") {
  Rng rng = make_rng(7);
  auto x = Tensor<double>::leaf({1, 1, 4, 5});
  fill_uniform<double>(rng, x.values(), -1.0, 1.0);

  auto k1 = nchw({1, 1, 1, 1}, {1.0});
  CHECK(to_vec(conv2d(x, k1)) == to_vec(x));

  // 3x3 kernel with a centered 1, padding 1
  std::vector<double> kv(9, 0.0);
  kv[4] = 1.0;
  auto k3 = nchw({1, 1, 3, 3}, kv);
  auto y = conv2d(x, k3, 1, 1);
  CHECK(y.shape() == x.shape());
  auto yv = to_vec(y), xv = to_vec(x);
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(yv[i] == Approx(xv[i]).margin(1e-15));
}

TEST_CASE("conv2d: bias, stride, and output extents") {
  auto x = Tensor<double>({1, 1, 4, 4}, 1.0);
  auto w = Tensor<double>({2, 1, 2, 2}, 1.0);
  auto b = nchw({2}, {10.0, -10.0});
  auto y = conv2d(x, w, b, 2, 0);
  CHECK(y.shape() == Shape{1, 2, 2, 2});
  CHECK(y.at4(0, 0, 0, 0) == 14.0);
  CHECK(y.at4(0, 1, 0, 0) == -6.0);
}

TEST_CASE("conv2d: argument validation") {
  auto x = Tensor<double>({1, 2, 4, 4}, 1.0);
  auto w_bad_cin = Tensor<double>({1, 3, 3, 3}, 1.0);
  CHECK_THROWS_AS(conv2d(x, w_bad_cin), ConfigError);
  auto w = Tensor<double>({1, 2, 3, 3}, 1.0);
  CHECK_THROWS_AS(conv2d(x, w, 0, 0), ConfigError);  // stride 0
  auto w_big = Tensor<double>({1, 2, 7, 7}, 1.0);
  CHECK_THROWS_AS(conv2d(x, w_big), ShapeError);  // kernel larger than input
  auto b_bad = Tensor<double>({3}, 0.0);
  CHECK_THROWS_AS(conv2d(x, w, b_bad), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng = make_rng(11);
  auto x = Tensor<double>::leaf({1, 2, 5, 5}, true);
  auto w = Tensor<double>::leaf({2, 2, 3, 3}, true);
  auto b = Tensor<double>::leaf({2}, true);
  fill_uniform<double>(rng, x.values(), -1.0, 1.0);
  fill_uniform<double>(rng, w.values(), -1.0, 1.0);
  fill_uniform<double>(rng, b.values(), -1.0, 1.0);
  std::vector<Tensor<double>> leaves{x, w, b};
  auto err = fd_max_rel_error(leaves, [&] { return sum(mul(conv2d(x, w, b, 2, 1),
                                                           conv2d(x, w, b, 2, 1))); });
  CHECK(err < 1e-6);
}

TEST_CASE("avg_pool2d and max_pool2d on [[1,2],[3,4]]") {
  auto x = nchw({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(avg_pool2d(x, 2, 2).item() == 2.5);
  CHECK(max_pool2d(x, 2, 2).item() == 4.0);
}

TEST_CASE("pooling on constant input") {
  auto x = Tensor<double>({1, 1, 4, 4}, 3.0);
  auto a = avg_pool2d(x, 2, 2);
  auto m = max_pool2d(x, 2, 2);
  for (double v : a.values()) CHECK(v == 3.0);
  for (double v : m.values()) CHECK(v == 3.0);
}

TEST_CASE("max_pool2d routes gradient to the first maximizer on ties") {
  auto x = Tensor<double>::leaf({1, 1, 2, 2}, true);
  std::fill(x.values().begin(), x.values().end(), 1.0);
  backward(sum(max_pool2d(x, 2, 2)));
  auto g = x.grad();
  CHECK(std::vector<double>(g.begin(), g.end()) == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("avg_pool2d distributes gradient uniformly") {
  auto x = Tensor<double>::leaf({1, 1, 2, 2}, true);
  backward(sum(avg_pool2d(x, 2, 2)));
  for (double g : x.grad()) CHECK(g == 0.25);
}

TEST_CASE("pooling validation") {
  auto x = Tensor<double>({1, 1, 2, 2}, 0.0);
  CHECK_THROWS_AS(avg_pool2d(x, 0, 1), ConfigError);
  CHECK_THROWS_AS(max_pool2d(x, 2, 0), ConfigError);
  CHECK_THROWS_AS(avg_pool2d(x, 5, 1), ShapeError);
}

TEST_CASE("bilinear_upsample2x: [0,1] row becomes [0, 0.25, 0.75, 1]") {
  auto x = nchw({1, 1, 1, 2}, {0.0, 1.0});
  auto y = bilinear_upsample2x(x);
  CHECK(y.shape() == Shape{1, 1, 2, 4});
  auto v = to_vec(y);
  const std::vector<double> expect{0.0, 0.25, 0.75, 1.0};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(v[r * 4 + c] == Approx(expect[c]).margin(1e-15));
}

TEST_CASE("bilinear_upsample2x preserves constants and doubles extents") {
  auto x = Tensor<double>({2, 3, 4, 5}, 1.25);
  auto y = bilinear_upsample2x(x);
  CHECK(y.shape() == Shape{2, 3, 8, 10});
  for (double v : y.values()) CHECK(v == Approx(1.25).margin(1e-15));
}

TEST_CASE("batch_norm: gamma 0 gives beta everywhere") {
  Rng rng = make_rng(3);
  auto x = Tensor<double>::leaf({2, 2, 3, 3});
  fill_uniform<double>(rng, x.values(), -5.0, 5.0);
  auto gamma = Tensor<double>({2}, 0.0);
  auto beta = nchw({2}, {1.5, -2.0});
  BatchNormState<double> st;
  auto y = batch_norm(x, gamma, beta, st, BnMode::train);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t n = 0; n < 2; ++n)
        CHECK(y.at4(n, c, i / 3, i % 3) == beta.values()[c]);
}

TEST_CASE("batch_norm: already-normalized input passes through up to epsilon") {
  // per-channel mean 0, population variance 1 by construction
  auto x = nchw({1, 1, 1, 2}, {-1.0, 1.0});
  auto gamma = Tensor<double>({1}, 1.0);
  auto beta = Tensor<double>({1}, 0.0);
  BatchNormState<double> st;
  auto y = batch_norm(x, gamma, beta, st, BnMode::train);
  const double scale = 1.0 / std::sqrt(1.0 + 1e-5);
  CHECK(y.values()[0] == Approx(-scale).epsilon(1e-12));
  CHECK(y.values()[1] == Approx(scale).epsilon(1e-12));
}

TEST_CASE("batch_norm: train-mode output has mean ~0 and variance ~1 per channel") {
  Rng rng = make_rng(5);
  auto x = Tensor<double>::leaf({4, 3, 8, 8});
  fill_uniform<double>(rng, x.values(), -2.0, 7.0);
  auto gamma = Tensor<double>({3}, 1.0);
  auto beta = Tensor<double>({3}, 0.0);
  BatchNormState<double> st;
  auto y = batch_norm(x, gamma, beta, st, BnMode::train);
  const std::size_t M = 4 * 8 * 8;
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 64; ++i) m += y.at4(n, c, i / 8, i % 8);
    m /= double(M);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 64; ++i) {
        const double d = y.at4(n, c, i / 8, i % 8) - m;
        v += d * d;
      }
    v /= double(M);
    CHECK(std::abs(m) < 1e-6);
    CHECK(v == Approx(1.0).epsilon(1e-3));  // var/(var+eps) just below 1
  }
}

TEST_CASE("batch_norm: running statistics update and drive eval mode") {
  auto x = nchw({1, 1, 1, 2}, {2.0, 6.0});  // batch mean 4, population var 4
  auto gamma = Tensor<double>({1}, 1.0);
  auto beta = Tensor<double>({1}, 0.0);
  BatchNormState<double> st;

  CHECK_THROWS_AS(batch_norm(x, gamma, beta, st, BnMode::eval), StateError);

  (void)batch_norm(x, gamma, beta, st, BnMode::train);
  CHECK(st.initialized);
  CHECK(st.running_mean[0] == Approx(0.9 * 0.0 + 0.1 * 4.0).epsilon(1e-12));
  CHECK(st.running_var[0] == Approx(0.9 * 1.0 + 0.1 * 4.0).epsilon(1e-12));

  auto y = batch_norm(x, gamma, beta, st, BnMode::eval);
  const double is = 1.0 / std::sqrt(st.running_var[0] + 1e-5);
  CHECK(y.values()[0] == Approx((2.0 - st.running_mean[0]) * is).epsilon(1e-12));
  CHECK(y.values()[1] == Approx((6.0 - st.running_mean[0]) * is).epsilon(1e-12));
}

TEST_CASE("batch_norm validation") {
  auto x = Tensor<double>({1, 2, 2, 2}, 0.0);
  auto g1 = Tensor<double>({1}, 1.0);
  auto b2 = Tensor<double>({2}, 0.0);
  BatchNormState<double> st;
  CHECK_THROWS_AS(batch_norm(x, g1, b2, st, BnMode::train), ShapeError);
  auto g2 = Tensor<double>({2}, 1.0);
  CHECK_THROWS_AS(batch_norm(x, g2, b2, st, BnMode::train, 0.1, 0.0), ConfigError);
}

TEST_CASE("batch_norm train-mode gradients match finite differences") {
  Rng rng = make_rng(17);
  auto x = Tensor<double>::leaf({2, 2, 3, 3}, true);
  auto gamma = Tensor<double>::leaf({2}, true);
  auto beta = Tensor<double>::leaf({2}, true);
  fill_uniform<double>(rng, x.values(), -1.0, 1.0);
  fill_uniform<double>(rng, gamma.values(), 0.5, 1.5);
  fill_uniform<double>(rng, beta.values(), -0.5, 0.5);
  std::vector<Tensor<double>> leaves{x, gamma, beta};
  auto err = fd_max_rel_error(leaves, [&] {
    BatchNormState<double> st;
    auto y = batch_norm(x, gamma, beta, st, BnMode::train);
    return sum(mul(y, y));
  });
  // normalization amplifies finite-difference truncation error slightly
  CHECK(err < 1e-5);
}
