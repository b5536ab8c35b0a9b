#include <gtest/gtest.h>

#include <cmath>

#include "esa/data.hpp"
#include "esa/lanes.hpp"

namespace {

using esa::SceneSpec;

SceneSpec clean_spec() {
  SceneSpec s;
  s.brightness = 1.0;
  s.noise_std = 0.0;
  return s;
}

bool is_lane_colour(const esa::Sample& s, std::size_t y, std::size_t x) {
  for (std::size_t c = 0; c < 3; ++c) {
    if (std::abs(s.image(c, y, x) - esa::scene_colors::lane[c]) > 1e-12) return false;
  }
  return true;
}

TEST(GenerateScene, CleanSceneShowsLanesExactlyWhereLabelled) {
  const auto s = esa::generate_scene(clean_spec(), 1);
  std::size_t lane_pixels = 0;
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      EXPECT_EQ(s.occlusion_mask(y, x), 0);
      EXPECT_EQ(is_lane_colour(s, y, x), s.label(y, x) != 0) << y << "," << x;
      lane_pixels += s.label(y, x) != 0;
    }
  }
  EXPECT_GT(lane_pixels, 0u);
  EXPECT_EQ(s.existence.storage(), (std::vector<double>{1, 1, 1, 1}));
}

TEST(GenerateScene, FullOcclusionKeepsLabel) {
  auto spec = clean_spec();
  const auto clear = esa::generate_scene(spec, 1);
  spec.occluders.push_back({{0, 0, 32, 64}, 0.1});
  const auto hidden = esa::generate_scene(spec, 1);
  EXPECT_EQ(hidden.label, clear.label);
  for (std::size_t i = 0; i < hidden.label.size(); ++i) {
    EXPECT_EQ(hidden.occlusion_mask[i], hidden.label[i] != 0 ? 1 : 0);
    EXPECT_EQ(hidden.occluder_region[i], 1);
  }
}

TEST(GenerateScene, SymmetricLanesGiveMirroredLabel) {
  auto spec = clean_spec();
  spec.lane_count = 2;
  spec.lane_angles = {-0.6, 0.6};
  spec.vp_x = 31.5;
  const auto s = esa::generate_scene(spec, 0);
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const int a = s.label(y, x), b = s.label(y, 63 - x);
      EXPECT_EQ(a != 0, b != 0) << y << "," << x;
      // Where both lanes cover the centre columns the later lane is drawn on top.
      const bool centre = x >= 30 && x <= 33;
      if (a != 0 && !(centre && a == b)) EXPECT_EQ(a, 3 - b) << y << "," << x;
    }
  }
}

TEST(GenerateScene, InvalidSpecIsRejected) {
  auto spec = clean_spec();
  spec.lane_count = 5;
  EXPECT_THROW(esa::generate_scene(spec, 0), std::invalid_argument);
  spec = clean_spec();
  spec.occluders.push_back({{0, 0, 40, 10}, 0.2});
  EXPECT_THROW(esa::generate_scene(spec, 0), std::invalid_argument);
}

TEST(SceneText, RoundTrip) {
  auto spec = clean_spec();
  spec.occluders.push_back({{3, 4, 10, 20}, 0.25});
  spec.curvature = 0.5;
  const auto back = esa::scene_from_text(esa::to_text(spec));
  EXPECT_EQ(esa::to_text(back), esa::to_text(spec));
  EXPECT_EQ(esa::generate_scene(back, 5).image, esa::generate_scene(spec, 5).image);
}

TEST(GenerateDataset, SingleSampleMatchesScene) {
  const esa::SceneDistribution dist;
  const auto ds = esa::generate_dataset(dist, 1, 9);
  ASSERT_EQ(ds.samples.size(), 1u);
  const auto& e = ds.manifest[0];
  EXPECT_EQ(ds.samples[0].image, esa::generate_scene(e.spec, esa::mix_seed(e.seed, 1)).image);
}

TEST(GenerateDataset, DeterministicManifest) {
  const esa::SceneDistribution dist;
  const auto a = esa::generate_dataset(dist, 20, 4), b = esa::generate_dataset(dist, 20, 4);
  const auto c = esa::generate_dataset(dist, 20, 5);
  EXPECT_EQ(esa::manifest_hash(a.manifest), esa::manifest_hash(b.manifest));
  EXPECT_NE(esa::manifest_hash(a.manifest), esa::manifest_hash(c.manifest));
  EXPECT_THROW(esa::generate_dataset(dist, 0, 4), std::invalid_argument);
}

TEST(GenerateDataset, OccluderRateMatchesDistribution) {
  const esa::SceneDistribution dist;
  const auto ds = esa::generate_dataset(dist, 1000, 2024);
  std::size_t occluded = 0;
  for (const auto& e : ds.manifest) occluded += !e.spec.occluders.empty();
  EXPECT_NEAR(static_cast<double>(occluded) / 1000.0, dist.occluder_probability, 0.03);
}

TEST(RasterizeLanes, VerticalLineHasThicknessWidth) {
  const auto l = esa::rasterize_lanes({{{40.0, 0.0}, {40.0, 99.0}}}, 8.0, 100, 80);
  for (std::size_t y = 1; y < 99; ++y) {
    int n = 0;
    for (std::size_t x = 0; x < 80; ++x) n += l(y, x) != 0;
    EXPECT_EQ(n, 8) << "row " << y;
  }
}

TEST(RasterizeLanes, EmptyAndTooMany) {
  const auto l = esa::rasterize_lanes({}, 4.0, 10, 10);
  for (int v : l) EXPECT_EQ(v, 0);
  std::vector<esa::Polyline> five;
  for (int i = 0; i < 5; ++i) five.push_back({{10.0 * i + 5, 0.0}, {10.0 * i + 5, 9.0}});
  EXPECT_THROW(esa::rasterize_lanes(five, 2.0, 10, 60), std::invalid_argument);
  const auto b = esa::rasterize_lanes(five, 2.0, 10, 60, esa::RasterMode::binary);
  for (int v : b) EXPECT_TRUE(v == 0 || v == 1);
}

TEST(RasterizeLanes, ClassesOrderedLeftToRight) {
  const esa::Polyline right{{50.0, 0.0}, {50.0, 19.0}}, left{{10.0, 0.0}, {10.0, 19.0}};
  const auto l = esa::rasterize_lanes({right, left}, 2.0, 20, 60);
  EXPECT_EQ(l(10, 10), 1);
  EXPECT_EQ(l(10, 50), 2);
}

}  // namespace
