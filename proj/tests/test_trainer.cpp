#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "esa/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using esa::InMemorySource;
using esa::Model;
using esa::ModelConfig;
using esa::TrainConfig;

std::vector<esa::Sample> scenes(std::size_t n, std::uint64_t seed) {
  return esa::generate_dataset(esa::SceneDistribution{}, n, seed).samples;
}

ModelConfig model_config(bool esa_h, std::uint64_t seed = 1) {
  ModelConfig c;
  c.esa_horizontal = esa_h;
  c.seed = seed;
  return c;
}

TrainConfig small_train(std::size_t steps) {
  TrainConfig t;
  t.lr = 0.02;
  t.batch_size = 4;
  t.max_steps = steps;
  t.seed = 5;
  return t;
}

std::uint64_t parameter_hash(const Model<float>& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < m.parameters().count(); ++i) h = esa::content_hash(m.parameters().at(i), h);
  return h;
}

TEST(MakeBatch, StacksSamples) {
  const auto s = scenes(3, 1);
  const auto b = esa::make_batch<float>(s);
  EXPECT_EQ(b.images.shape(), (esa::Shape{3, 3, 32, 64}));
  EXPECT_EQ(b.labels.values.shape(), (esa::Shape{3, 32, 64}));
  EXPECT_EQ(b.existence.shape(), (esa::Shape{3, 4}));
  EXPECT_FLOAT_EQ(b.images(2, 1, 5, 7), static_cast<float>(s[2].image(1, 5, 7)));
  EXPECT_THROW(esa::make_batch<float>({}), std::invalid_argument);
}

TEST(EpochOrder, IsSeededPermutation) {
  auto a = esa::epoch_order(50, 3, 0);
  EXPECT_EQ(a, esa::epoch_order(50, 3, 0));
  EXPECT_NE(a, esa::epoch_order(50, 3, 1));
  std::sort(a.begin(), a.end());
  std::vector<std::size_t> iota(50);
  std::iota(iota.begin(), iota.end(), 0);
  EXPECT_EQ(a, iota);
}

TEST(ComputeLoss, ZeroGammaLeavesBackboneGradientUnchanged) {
  const auto batch = esa::make_batch<double>(scenes(2, 2));
  Model<double> plain(model_config(false)), with(model_config(true));
  esa::LossOptions opt;
  opt.weights.gamma = 0.0;
  const auto a = esa::compute_loss(plain, batch, opt);
  const auto b = esa::compute_loss(with, batch, opt);
  EXPECT_EQ(a.report.seg, b.report.seg);
  EXPECT_EQ(a.report.exist, b.report.exist);
  EXPECT_EQ(a.report.total, b.report.total);
  EXPECT_GT(b.report.esa_h, 0.0);
  for (const auto& name : plain.parameters().names()) EXPECT_EQ(a.gradients[name], b.gradients[name]) << name;
}

TEST(Train, ZeroGammaTraceMatchesBaseline) {
  InMemorySource data(scenes(8, 3));
  Model<float> plain(model_config(false)), with(model_config(true));
  auto cfg = small_train(6);
  cfg.loss.weights.gamma = 0.0;
  const auto a = esa::train(plain, data, cfg);
  const auto b = esa::train(with, data, cfg);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss.seg, b.log[i].loss.seg);
    EXPECT_EQ(a.log[i].loss.total, b.log[i].loss.total);
  }
  EXPECT_EQ(parameter_hash(plain), [&] {
    Model<float> backbone(model_config(false));
    for (const auto& n : backbone.parameters().names()) backbone.parameters()[n] = with.parameters()[n];
    return parameter_hash(backbone);
  }());
}

TEST(Train, DeterministicLogAndArtifacts) {
  InMemorySource data(scenes(6, 4));
  const auto dir = fs::temp_directory_path() / "esa_train_test";
  fs::remove_all(dir);
  Model<float> a(model_config(true)), b(model_config(true));
  auto cfg = small_train(4);
  cfg.lr_schedule = esa::LrSchedule::polynomial;
  const auto ra = esa::train(a, data, cfg, {dir, {}});
  const auto rb = esa::train(b, data, cfg);
  ASSERT_EQ(ra.log.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ra.log[i].to_line(), rb.log[i].to_line());
  EXPECT_EQ(parameter_hash(a), parameter_hash(b));
  EXPECT_DOUBLE_EQ(ra.log[0].lr, 0.02);
  EXPECT_LT(ra.log[3].lr, ra.log[1].lr);
  for (const char* f : {"train_log.txt", "checkpoint_final.bin", "checkpoint_best.bin"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto loaded = esa::load_checkpoint<float>((dir / "checkpoint_final.bin").string());
  EXPECT_EQ(parameter_hash(loaded.model), parameter_hash(a));
  fs::remove_all(dir);
}

TEST(Train, WarmupZeroesGammaForLeadingSteps) {
  InMemorySource data(scenes(4, 5));
  Model<float> m(model_config(true));
  auto cfg = small_train(3);
  cfg.esa_warmup_steps = 2;
  const auto r = esa::train(m, data, cfg);
  const auto expected = [&](const esa::StepRecord& s, double gamma) {
    return s.loss.seg + cfg.loss.weights.beta * s.loss.exist + gamma * s.loss.esa_h;
  };
  EXPECT_NEAR(r.log[0].loss.total, expected(r.log[0], 0.0), 1e-9);
  EXPECT_NEAR(r.log[1].loss.total, expected(r.log[1], 0.0), 1e-9);
  EXPECT_NEAR(r.log[2].loss.total, expected(r.log[2], cfg.loss.weights.gamma), 1e-6);
}

TEST(Train, NonFiniteLossAbortsWithDump) {
  InMemorySource data(scenes(4, 6));
  const auto dir = fs::temp_directory_path() / "esa_train_nonfinite";
  fs::remove_all(dir);
  Model<float> m(model_config(false));
  m.parameters()["head.bias"][0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(esa::train(m, data, small_train(2), {dir, {}}), esa::NumericalError);
  std::ifstream dump(dir / "nonfinite_dump.txt");
  std::string first;
  std::getline(dump, first);
  EXPECT_NE(first.find("step 0"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Train, InvalidConfig) {
  InMemorySource data(scenes(2, 7));
  Model<float> m(model_config(false));
  auto cfg = small_train(1);
  cfg.lr = 0.0;
  EXPECT_THROW(esa::train(m, data, cfg), std::invalid_argument);
  EXPECT_THROW(esa::train(m, InMemorySource({}), small_train(1)), std::invalid_argument);
}

TEST(Evaluate, ReadOnlyAndHandlesUntrainedModel) {
  InMemorySource data(scenes(6, 8));
  const Model<float> m(model_config(true));
  const auto before = parameter_hash(m);
  const auto r = esa::evaluate(m, data, esa::Protocol::culane);
  EXPECT_EQ(parameter_hash(m), before);
  EXPECT_EQ(m.esa_evaluations(), 0u);
  EXPECT_LE(r.at("recall"), 0.05);
  EXPECT_TRUE(r.values.count("occluded_iou"));
  const auto t = esa::evaluate(m, data, esa::Protocol::tusimple);
  EXPECT_TRUE(t.values.count("accuracy"));
}

TEST(Evaluate, PerfectPredictorScoresOne) {
  // Ground truth through the metric pipeline: decoded labels must match themselves.
  const auto s = scenes(4, 9);
  const auto anchors = esa::row_anchors(32, 2);
  std::vector<esa::CulaneImage> imgs;
  for (const auto& x : s) {
    esa::CulaneImage img{32, 64, {}, {}};
    for (const auto& l : esa::restrict_to_anchors(x.lanes, anchors)) img.gts.push_back(esa::to_polyline(l));
    img.preds = img.gts;
    imgs.push_back(img);
  }
  EXPECT_DOUBLE_EQ(esa::culane_f1(imgs, {4.0, 0.5}).at("f1"), 1.0);
}

TEST(Evaluate, ProtocolMismatchNamesProtocols) {
  InMemorySource lanes(scenes(2, 10));
  InMemorySource binary(scenes(2, 10), esa::AnnotationStyle::binary_lanes);
  const Model<float> m(model_config(false));
  try {
    esa::evaluate(m, lanes, esa::Protocol::bdd);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("bdd"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("culane"), std::string::npos);
  }
  EXPECT_THROW(esa::evaluate(m, binary, esa::Protocol::culane), std::invalid_argument);
}

TEST(Ablation, SingleValueEqualsManualRun) {
  InMemorySource train(scenes(6, 11)), test(scenes(4, 12));
  auto cfg = small_train(3);
  const auto factory = [] { return Model<float>(model_config(true, 21)); };
  const auto r = esa::ablate_upsilon<float>(factory, train, test, {0.8}, cfg, esa::Protocol::culane);
  ASSERT_EQ(r.scores.size(), 1u);

  Model<float> manual = factory();
  auto c = cfg;
  c.loss.weights.upsilon = 0.8;
  esa::train(manual, train, c);
  const auto expected = esa::evaluate(manual, test, esa::Protocol::culane);
  EXPECT_EQ(r.scores[0].values, expected.values);
  EXPECT_NE(r.table().find("upsilon"), std::string::npos);
  EXPECT_THROW(esa::ablate_upsilon<float>(factory, train, test, {}, cfg, esa::Protocol::culane),
               std::invalid_argument);
}

TEST(GradientCheck, CorruptedGradientIsReported) {
  esa::GradientCheckOptions opt;
  opt.points = 1;
  opt.corrupt = [](const std::string& name, std::vector<double>& g) {
    if (name.find("existence") != std::string::npos && !g.empty()) g[0] += 1.0;
  };
  const auto r = esa::gradient_check_suite(3, opt);
  EXPECT_FALSE(r.passed());
  bool found = false;
  for (const auto& e : r.entries) {
    if (e.name.find("existence") != std::string::npos) {
      found = true;
      EXPECT_FALSE(e.passed());
    }
  }
  EXPECT_TRUE(found);
}

TEST(GradientCheck, DeterministicReport) {
  esa::GradientCheckOptions opt;
  opt.points = 1;
  const auto a = esa::gradient_check_suite(4, opt), b = esa::gradient_check_suite(4, opt);
  EXPECT_EQ(a.to_text(), b.to_text());
  EXPECT_TRUE(a.passed()) << a.to_text();
}

}  // namespace
