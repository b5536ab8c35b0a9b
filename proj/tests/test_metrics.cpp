#include <gtest/gtest.h>

#include <filesystem>

#include "esa/metrics.hpp"
#include "esa/trainer.hpp"

namespace {

using esa::LanePoints;
using esa::Mask;
using esa::Tensor;

LanePoints vertical_lane(double x, int y0, int y1, int step = 1) {
  LanePoints l;
  for (int y = y0; y <= y1; y += step) l.points.push_back({x, y});
  return l;
}

Mask rect_mask(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1) {
  Mask m({h, w});
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) m(y, x) = 1;
  return m;
}

TEST(F1FromCounts, Examples) {
  const auto z = esa::f1_from_counts(0, 0, 0);
  EXPECT_EQ(z.precision, 0.0);
  EXPECT_EQ(z.recall, 0.0);
  EXPECT_EQ(z.f1, 0.0);
  const auto h = esa::f1_from_counts(1, 1, 1);
  EXPECT_DOUBLE_EQ(h.f1, 0.5);
  const auto t = esa::f1_from_counts(2, 1, 1);
  EXPECT_DOUBLE_EQ(t.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.f1, 2.0 / 3.0);
  EXPECT_THROW(esa::f1_from_counts(-1, 0, 0), std::invalid_argument);
}

TEST(LaneIou, Examples) {
  const auto a = rect_mask(10, 10, 0, 0, 4, 4);
  EXPECT_DOUBLE_EQ(esa::lane_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(esa::lane_iou(a, rect_mask(10, 10, 6, 6, 10, 10)), 0.0);
  EXPECT_DOUBLE_EQ(esa::lane_iou(a, rect_mask(10, 10, 0, 2, 4, 6)), 1.0 / 3.0);
  EXPECT_THROW(esa::lane_iou(a, Mask({10, 9})), std::invalid_argument);
}

TEST(LanesFromProbability, RoundTripOfRasterizedLane) {
  const double centre = 20.0, thickness = 6.0;
  const auto label = esa::rasterize_lanes({{{centre, 0.0}, {centre, 31.0}}}, thickness, 32, 48);
  const auto p = esa::label_probability<double>(label, 1);
  const std::vector<int> anchors{2, 10, 18, 26};
  const auto lanes = esa::lanes_from_probability(p, 0, std::nullopt, anchors);
  ASSERT_EQ(lanes.size(), 1u);
  ASSERT_EQ(lanes[0].points.size(), anchors.size());
  for (const auto& pt : lanes[0].points) EXPECT_LE(std::abs(pt.x - centre), thickness / 2);
}

TEST(LanesFromProbability, ExistenceAndUniformGiveNothing) {
  const auto label = esa::rasterize_lanes({{{10.0, 0.0}, {10.0, 15.0}}, {{30.0, 0.0}, {30.0, 15.0}}}, 4.0, 16, 40);
  const auto p = esa::label_probability<double>(label, 2);
  const std::vector<int> anchors{1, 5, 9};
  const std::vector<double> absent{0.0, 0.0};
  EXPECT_TRUE(esa::lanes_from_probability(p, 0, std::span<const double>(absent), anchors).empty());

  const esa::ProbabilityMap<double> uniform{Tensor<double>({1, 3, 16, 40}, 1.0 / 3.0)};
  EXPECT_TRUE(esa::lanes_from_probability(uniform, 0, std::nullopt, anchors).empty());
  EXPECT_THROW(esa::lanes_from_probability(p, 0, std::nullopt, {}), std::invalid_argument);
}

TEST(Tusimple, IdenticalPredictions) {
  const std::vector<std::vector<LanePoints>> gts{{vertical_lane(100, 0, 99, 10), vertical_lane(300, 0, 99, 10)}};
  const auto r = esa::tusimple_score(gts, gts);
  EXPECT_DOUBLE_EQ(r.at("accuracy"), 1.0);
  EXPECT_DOUBLE_EQ(r.at("fp"), 0.0);
  EXPECT_DOUBLE_EQ(r.at("fn"), 0.0);
}

TEST(Tusimple, NinetyOfHundredPoints) {
  const auto gt = vertical_lane(100, 0, 99);
  auto pred = gt;
  for (int i = 0; i < 10; ++i) pred.points[static_cast<std::size_t>(i)].x += 25.0;
  const auto r = esa::tusimple_score({{pred}}, {{gt}});
  EXPECT_DOUBLE_EQ(r.at("accuracy"), 0.90);
  EXPECT_EQ(r.tp, 1u);
}

TEST(Tusimple, LowAccuracyLaneIsFalsePositiveAndNegative) {
  const auto gt = vertical_lane(100, 0, 99);
  auto pred = gt;
  for (int i = 0; i < 20; ++i) pred.points[static_cast<std::size_t>(i)].x += 25.0;
  const auto r = esa::tusimple_score({{pred}}, {{gt}});
  EXPECT_DOUBLE_EQ(r.at("accuracy"), 0.80);
  EXPECT_DOUBLE_EQ(r.at("fp"), 1.0);
  EXPECT_DOUBLE_EQ(r.at("fn"), 1.0);
}

TEST(Tusimple, PredictionOffAnchorIsRejected) {
  const auto gt = vertical_lane(100, 0, 90, 10);
  const auto pred = vertical_lane(100, 1, 91, 10);
  EXPECT_THROW(esa::tusimple_score({{pred}}, {{gt}}), std::invalid_argument);
}

TEST(Culane, PerfectAndCounted) {
  esa::CulaneImage img{100, 200, {}, {}};
  img.gts = {{{50.0, 0.0}, {50.0, 99.0}}, {{150.0, 0.0}, {150.0, 99.0}}};
  img.preds = img.gts;
  EXPECT_DOUBLE_EQ(esa::culane_f1({img}).at("f1"), 1.0);

  // Two hits, one spurious prediction, one missed lane.
  esa::CulaneImage two{100, 400, {}, {}};
  two.gts = {{{40.0, 0.0}, {40.0, 99.0}}, {{140.0, 0.0}, {140.0, 99.0}}, {{240.0, 0.0}, {240.0, 99.0}}};
  two.preds = {{{40.0, 0.0}, {40.0, 99.0}}, {{140.0, 0.0}, {140.0, 99.0}}, {{340.0, 0.0}, {340.0, 99.0}}};
  const auto r = esa::culane_f1({two});
  EXPECT_EQ(r.tp, 2u);
  EXPECT_EQ(r.fp, 1u);
  EXPECT_EQ(r.fn, 1u);
  EXPECT_DOUBLE_EQ(r.at("f1"), 2.0 / 3.0);
}

TEST(Bdd, AgreementAndInversion) {
  const auto gt = rect_mask(4, 4, 0, 0, 4, 2);
  const auto same = esa::bdd_score(gt, gt);
  EXPECT_DOUBLE_EQ(same.at("pixel_accuracy"), 1.0);
  EXPECT_DOUBLE_EQ(same.at("iou"), 1.0);
  Mask inv(gt.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) inv[i] = gt[i] ? 0 : 1;
  EXPECT_DOUBLE_EQ(esa::bdd_score(inv, gt).at("pixel_accuracy"), 0.0);
  EXPECT_THROW(esa::bdd_score(gt, Mask({4, 3})), std::invalid_argument);
}

TEST(MetricReport, TextAndJson) {
  esa::MetricReport r;
  r.values["f1"] = 0.5;
  r.tp = 3;
  EXPECT_NE(r.to_text().find("f1=0.5"), std::string::npos);
  EXPECT_EQ(r.to_json()["counts"]["tp"], 3);
  EXPECT_THROW(r.at("missing"), std::out_of_range);
  EXPECT_EQ(esa::protocol_from_string("bdd"), esa::Protocol::bdd);
  EXPECT_THROW(esa::protocol_from_string("kitti"), std::invalid_argument);
}

TEST(LaneFile, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "esa_lane_file_test.lines.txt";
  const std::vector<LanePoints> lanes{vertical_lane(1.5, 2, 6, 2), vertical_lane(7.25, 0, 3)};
  esa::write_lane_file(path.string(), lanes);
  const auto back = esa::read_lane_file(path.string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].points, lanes[0].points);
  EXPECT_EQ(back[1].points, lanes[1].points);
  std::filesystem::remove(path);
}

}  // namespace
