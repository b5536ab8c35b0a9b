#include <gtest/gtest.h>

#include <cmath>

#include "esa/nn.hpp"
#include "esa/tensor.hpp"

namespace {

using esa::Rng;
using esa::Tensor;

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                          const esa::nn::ConvGeometry& g) {
  const auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  const auto ho = g.out_extent(h), wo = g.out_extent(wd);
  Tensor<double> y({n, co, ho, wo});
  for (std::size_t bi = 0; bi < n; ++bi)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double s = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < g.kernel; ++ky)
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.pad);
                const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long long>(h) || ix >= static_cast<long long>(wd)) continue;
                s += w(o, c, ky, kx) * x(bi, c, iy, ix);
              }
          y(bi, o, oy, ox) = s;
        }
  return y;
}

TEST(Tensor, ShapeAndIndexing) {
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  t(1, 2, 3) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_EQ(t.slice(1) - t.data(), 12);
  EXPECT_THROW(t.reshaped({5, 5}), std::invalid_argument);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Tensor, MixSeedIsDeterministicAndSpreads) {
  EXPECT_EQ(esa::mix_seed(7, 3), esa::mix_seed(7, 3));
  EXPECT_NE(esa::mix_seed(7, 3), esa::mix_seed(7, 4));
  EXPECT_NE(esa::mix_seed(7, 0), esa::mix_seed(8, 0));
}

TEST(Conv2d, MatchesDirectSumForStrideOneAndTwo) {
  Rng rng(1);
  const auto x = esa::random_uniform<double>({2, 3, 7, 9}, rng, -1, 1);
  const auto w = esa::random_uniform<double>({4, 3, 3, 3}, rng, -1, 1);
  const auto b = esa::random_uniform<double>({4}, rng, -1, 1);
  for (std::size_t stride : {1u, 2u}) {
    const esa::nn::ConvGeometry g{3, stride, 1};
    EXPECT_LT(esa::max_abs_diff(esa::nn::conv2d(x, w, b, g), naive_conv(x, w, b, g)), 1e-12);
  }
}

TEST(Conv2d, BackwardIsAdjointOfForward) {
  Rng rng(2);
  const esa::nn::ConvGeometry g{3, 2, 1};
  const auto x = esa::random_uniform<double>({1, 2, 6, 5}, rng, -1, 1);
  const auto w = esa::random_uniform<double>({3, 2, 3, 3}, rng, -1, 1);
  const Tensor<double> zero_b({3});
  const auto y = esa::nn::conv2d(x, w, zero_b, g);
  const auto dy = esa::random_uniform<double>(y.shape(), rng, -1, 1);
  Tensor<double> dw(w.shape()), db({3}), dx;
  esa::nn::conv2d_backward(x, w, dy, g, dw, db, &dx);
  // <conv(x), dy> is linear in both x and w.
  EXPECT_NEAR(dot(y, dy), dot(dx, x), 1e-10);
  EXPECT_NEAR(dot(y, dy), dot(dw, w), 1e-10);
}

TEST(Resize, NearestBackwardIsAdjoint) {
  Rng rng(3);
  const auto x = esa::random_uniform<double>({1, 2, 5, 9}, rng, -1, 1);
  const auto y = esa::nn::resize_nearest(x, 12, 17);
  const auto dy = esa::random_uniform<double>(y.shape(), rng, -1, 1);
  const auto dx = esa::nn::resize_nearest_backward(dy, 5, 9);
  EXPECT_NEAR(dot(y, dy), dot(dx, x), 1e-10);
}

TEST(Resize, BilinearBackwardIsAdjoint) {
  Rng rng(4);
  const auto x = esa::random_uniform<double>({2, 2, 8, 16}, rng, -1, 1);
  const auto y = esa::nn::resize_bilinear(x, 2, 4);
  const auto dy = esa::random_uniform<double>(y.shape(), rng, -1, 1);
  const auto dx = esa::nn::resize_bilinear_backward(dy, x.shape());
  EXPECT_NEAR(dot(y, dy), dot(dx, x), 1e-10);
}

TEST(Resize, BilinearIdentityAtSameSize) {
  Rng rng(5);
  const auto x = esa::random_uniform<double>({1, 1, 4, 6}, rng, 0, 1);
  EXPECT_LT(esa::max_abs_diff(esa::nn::resize_bilinear(x, 4, 6), x), 1e-15);
}

TEST(Layers, LinearPoolAndSigmoid) {
  const Tensor<double> x({1, 2}, {1.0, 2.0});
  const Tensor<double> w({2, 2}, {1.0, 0.0, 1.0, -1.0});
  const Tensor<double> b({2}, {0.5, 0.0});
  const auto y = esa::nn::linear(x, w, b);
  EXPECT_DOUBLE_EQ(y[0], 1.5);
  EXPECT_DOUBLE_EQ(y[1], -1.0);

  const Tensor<double> m({1, 1, 2, 2}, {1.0, 2.0, 3.0, 6.0});
  EXPECT_DOUBLE_EQ(esa::nn::global_avg_pool(m)[0], 3.0);
  EXPECT_DOUBLE_EQ(esa::nn::sigmoid(0.0), 0.5);
  EXPECT_GT(esa::nn::sigmoid(-800.0), -1e-300);
  EXPECT_LT(esa::nn::sigmoid(800.0), 1.0 + 1e-15);
}

}  // namespace
