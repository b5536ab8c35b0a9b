#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "esa/dataset_io.hpp"
#include "esa/image_io.hpp"
#include "esa/model.hpp"

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string output;
};

class Cli : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / ("esa_cli_" + std::string(
                     ::testing::UnitTest::GetInstance()->current_test_info()->name()));

  void SetUp() override {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  RunResult run(const std::string& args) const {
    const auto log = dir / "cli_output.txt";
    const std::string cmd = std::string(ESA_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(log);
    std::ostringstream ss;
    ss << is.rdbuf();
    r.output = ss.str();
    return r;
  }

  std::string synth(const std::string& name, std::size_t n, int seed = 1) const {
    const auto out = dir / name;
    const auto r = run("synth --set synth.n=" + std::to_string(n) + " --seed " + std::to_string(seed) + " --out " +
                       out.string());
    EXPECT_EQ(r.code, 0) << r.output;
    return out.string();
  }
};

std::string directory_digest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) {
    std::ifstream is(f, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    all += fs::relative(f, root).string() + '\n' + ss.str();
  }
  return all;
}

TEST_F(Cli, SynthWritesRequestedScenesDeterministically) {
  const auto a = synth("a", 10), b = synth("b", 10);
  std::size_t images = 0, labels = 0;
  for (const auto& e : fs::directory_iterator(fs::path(a) / "images")) images += e.path().extension() == ".png";
  for (const auto& e : fs::directory_iterator(fs::path(a) / "labels")) labels += e.path().extension() == ".png";
  EXPECT_EQ(images, 10u);
  EXPECT_EQ(labels, 10u);
  EXPECT_TRUE(fs::exists(fs::path(a) / "manifest.txt"));
  EXPECT_EQ(directory_digest(a), directory_digest(b));
}

TEST_F(Cli, InvalidConfigNamesKey) {
  auto r = run("synth --set synth.brightness_min=2 --out " + (dir / "x").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("brightness"), std::string::npos) << r.output;
  r = run("synth --set synth.bogus=1 --out " + (dir / "x").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("synth.bogus"), std::string::npos) << r.output;
}

TEST_F(Cli, GradcheckSucceeds) {
  const auto r = run("gradcheck --set gradcheck.points=1");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

TEST_F(Cli, MissingDataPathIsReported) {
  const auto missing = (dir / "nowhere").string();
  const auto r = run("train --set data.train.root=" + missing + " --out " + (dir / "run").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find(missing), std::string::npos) << r.output;
}

TEST_F(Cli, TrainEvalAndProtocolMismatch) {
  const auto train = synth("train", 4), test = synth("test", 2, 2);
  const auto run_dir = (dir / "run").string();
  auto r = run("train --set data.train.root=" + train + " --set data.test.root=" + test +
               " --set train.max_steps=2 --set train.batch_size=2 --set model.esa_horizontal=1 --out " + run_dir);
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"train_log.txt", "checkpoint_final.bin", "config.txt", "metrics.txt", "metrics.json"}) {
    EXPECT_TRUE(fs::exists(fs::path(run_dir) / f)) << f;
  }
  const auto ckpt = (fs::path(run_dir) / "checkpoint_final.bin").string();
  r = run("eval --set checkpoint=" + ckpt + " --set data.test.root=" + test + " --out " + (dir / "ev").string());
  EXPECT_EQ(r.code, 0) << r.output;
  r = run("eval --set checkpoint=" + ckpt + " --set data.test.root=" + test + " --set eval.protocol=bdd");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("bdd"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("culane"), std::string::npos) << r.output;
}

TEST_F(Cli, AblateWritesTable) {
  const auto train = synth("train", 4), test = synth("test", 2, 2);
  const auto out = dir / "abl";
  const auto r = run("ablate --set data.train.root=" + train + " --set data.test.root=" + test +
                     " --set model.esa_horizontal=1 --set train.max_steps=1 --set train.batch_size=2"
                     " --set ablate.upsilon_values=0.5,1 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "ablation.tsv"));
  std::ifstream is(out / "ablation.tsv");
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 3u);
}

TEST_F(Cli, VisualizeOverlaysAndChannelCheck) {
  esa::ModelConfig mc;
  mc.esa_vertical = true;
  esa::Model<float> model(mc);
  // Background logit dominates everywhere: the overlay must leave the image untouched.
  for (auto& w : model.parameters()["head.weight"]) w = 0.0f;
  model.parameters()["head.bias"][0] = 100.0f;
  const auto ckpt = (dir / "bg.bin").string();
  esa::save_checkpoint(ckpt, model);

  const auto images = dir / "images";
  fs::create_directories(images);
  const auto ds = esa::generate_dataset(esa::SceneDistribution{}, 3, 5);
  for (std::size_t i = 0; i < 3; ++i) {
    esa::write_png(images / ("img" + std::to_string(i) + ".png"), esa::from_tensor(ds.samples[i].image));
  }
  const auto out = dir / "vis";
  auto r = run("visualize --set checkpoint=" + ckpt + " --set visualize.images=" + images.string() + " --out " +
               out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::size_t overlays = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    overlays += e.path().filename().string().find("_overlay.png") != std::string::npos;
  }
  EXPECT_EQ(overlays, 3u);
  EXPECT_TRUE(fs::exists(out / "img0_confidence_vertical.png"));
  EXPECT_EQ(esa::read_rgb(out / "img1_overlay.png").pixels, esa::read_rgb(images / "img1.png").pixels);

  r = run("visualize --set checkpoint=" + ckpt + " --set model.lanes=2 --set visualize.images=" + images.string() +
          " --out " + out.string());
  EXPECT_EQ(r.code, 2) << r.output;
}

}  // namespace
