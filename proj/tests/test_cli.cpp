#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "bisenet/bt2.hpp"
#include "bisenet/image_io.hpp"
#include "bisenet/ops.hpp"
#include "oracles.hpp"

using namespace bisenet;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "bisenet_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(BISENET_CLI_PATH) + " " + args + " > " +
                          (kWork / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    std::ofstream(kWork / "tiny.cfg") << "alpha = 0.125\nnum_classes = 3\ninput_hw = 64x64\n"
                                         "crop_hw = 64x64\nbatch = 2\nmax_iter = 3\n"
                                         "eval_size = 2\noutput_dir = "
                                      << (kWork / "run").string() << "\n";
    ASSERT_EQ(run("train " + q(kWork / "tiny.cfg")), 0) << slurp(kWork / "last.log");
  }
};

}  // namespace

TEST_F(Cli, TrainWritesArtifacts) {
  for (const char* f : {"config.txt", "history.csv", "summary.txt", "checkpoint/manifest.txt"})
    EXPECT_TRUE(fs::exists(kWork / "run" / f)) << f;
  const std::string hist = slurp(kWork / "run" / "history.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 4);
}

TEST_F(Cli, InferLabelsMatchLogitsArgmax) {
  Tensor<float> img = oracle::random_tensor<float>({1, 3, 40, 72}, 3, 0, 1);
  image::write_pnm(kWork / "in.ppm", img);
  ASSERT_EQ(run("infer " + q(kWork / "run" / "checkpoint") + " " + q(kWork / "in.ppm") +
                " --out " + q(kWork / "labels.pgm") + " --logits " + q(kWork / "logits.bt2") +
                " --config " + q(kWork / "tiny.cfg")),
            0)
      << slurp(kWork / "last.log");
  const LabelMap labels = image::read_label_pgm(kWork / "labels.pgm");
  const auto logits = bt2::load<float>(kWork / "logits.bt2");
  EXPECT_EQ(logits.shape(), (Shape{1, 3, 40, 72}));
  EXPECT_EQ(labels, ops::argmax_channels(logits));
}

TEST_F(Cli, InferErrors) {
  image::write_pnm(kWork / "gray.pgm", Tensor<float>({1, 1, 8, 8}, 0.5f));
  EXPECT_EQ(run("infer " + q(kWork / "run" / "checkpoint") + " " + q(kWork / "gray.pgm")), 2);
  std::ofstream(kWork / "other.cfg") << "alpha = 0.25\nnum_classes = 3\ninput_hw = 64x64\n";
  image::write_pnm(kWork / "rgb.ppm", Tensor<float>({1, 3, 8, 8}, 0.5f));
  EXPECT_EQ(run("infer " + q(kWork / "run" / "checkpoint") + " " + q(kWork / "rgb.ppm") +
                " --config " + q(kWork / "other.cfg")),
            4);
  EXPECT_EQ(run("infer " + q(kWork / "nowhere") + " " + q(kWork / "rgb.ppm")), 4);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  std::ofstream(kWork / "bad.cfg") << "alpha = 0.125\nbogus = 1\n";
  EXPECT_EQ(run("train " + q(kWork / "bad.cfg")), 2);
  EXPECT_NE(slurp(kWork / "last.log").find("bad.cfg:2"), std::string::npos);
  EXPECT_EQ(run("analyze --convention gops"), 2);
  EXPECT_EQ(run("dump-golden " + q(kWork / "tiny.cfg") + " --taps nonexistent --out " +
                q(kWork / "g_bad")),
            2);
}

TEST_F(Cli, AnalyzeGridCsv) {
  ASSERT_EQ(run("analyze --grid --input-hw 1024x2048 --out " + q(kWork / "grid")), 0);
  const std::string csv = slurp(kWork / "grid" / "table.csv");
  EXPECT_EQ(csv.rfind("config,gflops_model,gflops_paper,params", 0), 0u);
  EXPECT_NE(csv.find("21.15"), std::string::npos);
  ASSERT_EQ(run("analyze --out " + q(kWork / "single")), 0);
  EXPECT_EQ(slurp(kWork / "single" / "report.csv").rfind("name,kind,macs,flops,params,act_bytes", 0),
            0u);
}

TEST_F(Cli, GoldenDumpsCompare) {
  const std::string cfg = q(kWork / "tiny.cfg");
  ASSERT_EQ(run("dump-golden " + cfg + " --seed 5 --out " + q(kWork / "g32")), 0);
  ASSERT_EQ(run("dump-golden " + cfg + " --seed 5 --dtype f64 --out " + q(kWork / "g64")), 0);
  ASSERT_EQ(run("dump-golden " + cfg + " --seed 6 --out " + q(kWork / "g6")), 0);
  EXPECT_TRUE(fs::exists(kWork / "g32" / "logits.bt2"));
  EXPECT_EQ(run("compare " + q(kWork / "g32") + " " + q(kWork / "g32")), 0);
  EXPECT_EQ(run("compare " + q(kWork / "g32") + " " + q(kWork / "g64") + " --tol 1e-5"), 0);
  EXPECT_EQ(run("compare " + q(kWork / "g32") + " " + q(kWork / "g6")), 1);
  EXPECT_EQ(run("compare " + q(kWork / "g32" / "logits.bt2") + " " + q(kWork / "g6" / "logits.bt2")),
            1);
}
