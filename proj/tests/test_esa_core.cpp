#include <gtest/gtest.h>

#include <algorithm>

#include "esa/esa_core.hpp"

namespace {

using esa::ConfidenceVector;
using esa::Direction;
using esa::Rng;
using esa::Tensor;

ConfidenceVector<double> random_conf(Direction d, std::size_t c, std::size_t extent, Rng& rng) {
  return {d, esa::random_uniform<double>({1, c, extent}, rng, 0.001, 0.999)};
}

TEST(ExpandHorizontal, DuplicatesAlongRows) {
  const auto conf = esa::single_confidence(Direction::horizontal, Tensor<double>({1, 2}, {0.2, 0.7}));
  const auto m = esa::expand_horizontal(conf, 3);
  EXPECT_EQ(m.values.shape(), (esa::Shape{1, 1, 2, 3}));
  EXPECT_EQ(m.values.storage(), (std::vector<double>{0.2, 0.2, 0.2, 0.7, 0.7, 0.7}));
}

TEST(ExpandHorizontal, ConstantConfidenceGivesConstantMatrix) {
  const auto conf = esa::single_confidence(Direction::horizontal, Tensor<double>({3, 5}, 0.5));
  const auto m = esa::expand_horizontal(conf, 7);
  EXPECT_TRUE(std::all_of(m.values.begin(), m.values.end(), [](double v) { return v == 0.5; }));
}

TEST(ExpandHorizontal, RowsHaveZeroSpread) {
  Rng rng(11);
  const auto m = esa::expand_horizontal(random_conf(Direction::horizontal, 4, 36, rng), 80);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t y = 0; y < 36; ++y) {
      const double* row = m.values.slice(0, c, y);
      const auto [lo, hi] = std::minmax_element(row, row + 80);
      EXPECT_EQ(*hi - *lo, 0.0);
    }
  }
}

TEST(ExpandHorizontal, Errors) {
  const auto h = esa::single_confidence(Direction::horizontal, Tensor<double>({1, 2}, 0.5));
  const auto v = esa::single_confidence(Direction::vertical, Tensor<double>({1, 2}, 0.5));
  EXPECT_THROW(esa::expand_horizontal(h, 0), std::invalid_argument);
  EXPECT_THROW(esa::expand_horizontal(v, 3), std::logic_error);
  EXPECT_THROW(esa::expand_vertical(h, 3), std::logic_error);
}

TEST(ExpandVertical, DuplicatesAlongColumns) {
  const auto conf = esa::single_confidence(Direction::vertical, Tensor<double>({1, 2}, {0.1, 0.9}));
  const auto m = esa::expand_vertical(conf, 2);
  EXPECT_EQ(m.values.shape(), (esa::Shape{1, 1, 2, 2}));
  EXPECT_EQ(m.values.storage(), (std::vector<double>{0.1, 0.9, 0.1, 0.9}));
}

TEST(ExpandVertical, NearOneStaysNearOne) {
  const double v = 1.0 - 1e-9;
  const auto m = esa::expand_vertical(esa::single_confidence(Direction::vertical, Tensor<double>({2, 4}, v)), 3);
  EXPECT_TRUE(std::all_of(m.values.begin(), m.values.end(), [&](double x) { return x == v; }));
}

TEST(ExpandVertical, ColumnsHaveZeroSpread) {
  Rng rng(12);
  const auto m = esa::expand_vertical(random_conf(Direction::vertical, 4, 80, rng), 36);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t x = 0; x < 80; ++x) {
      double lo = m.values(0, c, 0, x), hi = lo;
      for (std::size_t y = 0; y < 36; ++y) {
        lo = std::min(lo, m.values(0, c, y, x));
        hi = std::max(hi, m.values(0, c, y, x));
      }
      EXPECT_EQ(hi - lo, 0.0);
    }
  }
}

TEST(ExpandBackward, SumsOverBroadcastAxis) {
  Rng rng(13);
  const auto dm = esa::random_uniform<double>({2, 3, 4, 5}, rng, -1, 1);
  const auto dh = esa::expand_backward(Direction::horizontal, dm);
  const auto dv = esa::expand_backward(Direction::vertical, dm);
  EXPECT_EQ(dh.shape(), (esa::Shape{2, 3, 4}));
  EXPECT_EQ(dv.shape(), (esa::Shape{2, 3, 5}));
  double row = 0.0, col = 0.0;
  for (std::size_t x = 0; x < 5; ++x) row += dm(1, 2, 3, x);
  for (std::size_t y = 0; y < 4; ++y) col += dm(1, 2, y, 4);
  EXPECT_NEAR(dh(1, 2, 3), row, 1e-15);
  EXPECT_NEAR(dv(1, 2, 4), col, 1e-15);
}

TEST(ApplyEsaWeight, OnesZerosAndProduct) {
  Rng rng(14);
  esa::ProbabilityMap<double> p{esa::random_uniform<double>({1, 3, 2, 4}, rng, 0, 1)};
  const auto ones = esa::apply_esa_weight(p, {Direction::horizontal, Tensor<double>({1, 2, 2, 4}, 1.0)});
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_TRUE(std::equal(ones.values.slice(0, c), ones.values.slice(0, c) + 8, p.values.slice(0, c + 1)));
  }
  const auto zeros = esa::apply_esa_weight(p, {Direction::horizontal, Tensor<double>({1, 2, 2, 4}, 0.0)});
  EXPECT_TRUE(std::all_of(zeros.values.begin(), zeros.values.end(), [](double v) { return v == 0.0; }));

  esa::ProbabilityMap<double> q{Tensor<double>({1, 2, 1, 2}, {0.6, 0.4, 0.4, 0.6})};
  const auto e = esa::apply_esa_weight(q, {Direction::horizontal, Tensor<double>({1, 1, 1, 2}, 0.5)});
  EXPECT_DOUBLE_EQ(e.values[0], 0.2);
  EXPECT_DOUBLE_EQ(e.values[1], 0.3);

  EXPECT_THROW(esa::apply_esa_weight(q, {Direction::horizontal, Tensor<double>({1, 1, 2, 2}, 0.5)}),
               std::invalid_argument);
}

TEST(BuildEsaInput, ConcatenatesAtSmallestResolution) {
  Rng rng(15);
  std::vector<Tensor<double>> taps;
  const std::size_t ch[] = {8, 16, 32, 64};
  const std::size_t side[] = {32, 16, 8, 4};
  for (int i = 0; i < 4; ++i) taps.push_back(esa::random_uniform<double>({2, ch[i], side[i], side[i]}, rng, 0, 1));
  const auto in = esa::build_esa_input(taps);
  EXPECT_EQ(in.stack.shape(), (esa::Shape{2, 120, 4, 4}));
  // The smallest tap is copied through unchanged.
  EXPECT_TRUE(std::equal(taps[3].slice(1), taps[3].slice(1) + 64 * 16, in.stack.slice(1, 56)));
}

TEST(BuildEsaInput, SameResolutionIsPureConcatenation) {
  Rng rng(16);
  std::vector<Tensor<double>> taps;
  for (std::size_t c : {1u, 2u, 3u, 4u}) taps.push_back(esa::random_uniform<double>({1, c, 5, 6}, rng, 0, 1));
  const auto in = esa::build_esa_input(taps);
  std::vector<double> expected;
  for (const auto& t : taps) expected.insert(expected.end(), t.begin(), t.end());
  EXPECT_EQ(in.stack.storage(), expected);
}

TEST(BuildEsaInput, RequiresFourTaps) {
  std::vector<Tensor<double>> taps(3, Tensor<double>({1, 1, 2, 2}));
  EXPECT_THROW(esa::build_esa_input(taps), std::invalid_argument);
  taps.resize(5, Tensor<double>({1, 1, 2, 2}));
  EXPECT_THROW(esa::build_esa_input(taps), std::invalid_argument);
}

TEST(EsaEncoder, ShapeAndRange) {
  Rng rng(17);
  const auto stack = esa::random_uniform<double>({2, 120, 4, 8}, rng, 0, 1);
  const auto h = esa::esa_encoder_forward(stack, Direction::horizontal, 4, 36, 5);
  EXPECT_EQ(h.values.shape(), (esa::Shape{2, 4, 36}));
  EXPECT_TRUE(std::all_of(h.values.begin(), h.values.end(), [](double v) { return v > 0.0 && v < 1.0; }));
  const auto v = esa::esa_encoder_forward(stack, Direction::vertical, 4, 80, 5);
  EXPECT_EQ(v.values.shape(), (esa::Shape{2, 4, 80}));
  EXPECT_EQ(v.direction, Direction::vertical);
}

TEST(EsaEncoder, ZeroParametersGiveOneHalf) {
  Rng rng(18);
  const auto stack = esa::random_uniform<double>({1, 16, 4, 4}, rng, 0, 1);
  const auto c = esa::esa_encoder_forward(stack, Direction::horizontal, 2, 10, 0, true);
  EXPECT_TRUE(std::all_of(c.values.begin(), c.values.end(), [](double v) { return v == 0.5; }));
}

TEST(EsaEncoder, RejectsNonPositiveExtent) {
  const Tensor<double> stack({1, 4, 4, 4});
  EXPECT_THROW(esa::esa_encoder_forward(stack, Direction::horizontal, 2, 0), std::invalid_argument);
  EXPECT_THROW(esa::esa_encoder_forward(stack, Direction::vertical, 2, -3), std::invalid_argument);
}

}  // namespace
