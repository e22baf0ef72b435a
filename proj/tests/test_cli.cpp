#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "rfm/synthdata.hpp"
#include "test_util.hpp"

namespace rfm {
namespace {

namespace fs = std::filesystem;

const std::string kTiny =
    " --set data.categories=4 --set data.train_per_category=2 --set data.test_per_category=1"
    " --set data.refs_per_category=3 --set model.stem_channels=2 --set model.channels=4,4,4,4"
    " --set decoder.width=4";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    base_ = new fs::path(fs::temp_directory_path() / ("rfm_cli_" + std::to_string(::getpid())));
    fs::remove_all(*base_);
    fs::create_directories(*base_);
    ASSERT_EQ(run("gen --out " + (*base_ / "data").string() + kTiny), 0);
    ASSERT_EQ(run("train --data " + (*base_ / "data").string() + " --out " + (*base_ / "run").string() + kTiny +
                  " --steps 3 --refs 2"),
              0);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*base_);
    delete base_;
  }

  // Runs rfk with stdout and stderr captured to <base>/last.txt.
  static int run(const std::string& args, const std::string& env = "") {
    const std::string cmd =
        env + " " + std::string(RFK_BINARY) + " " + args + " > " + (*base_ / "last.txt").string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  static std::string last() { return slurp(*base_ / "last.txt"); }

  static fs::path* base_;
};

fs::path* Cli::base_ = nullptr;

TEST_F(Cli, GenWritesDatasetAndEchoesConfig) {
  const fs::path d = *base_ / "data";
  EXPECT_TRUE(fs::exists(d / "manifest.tsv"));
  EXPECT_EQ(synth::load_split(d.string(), "train").size(), 8u);
  EXPECT_EQ(synth::load_split(d.string(), "test").size(), 4u);
  EXPECT_EQ(run("gen --out " + d.string() + kTiny), 1);
  EXPECT_NE(last().find("not empty"), std::string::npos) << last();
}

TEST_F(Cli, GenIsByteDeterministicAndHonoursSeedEnv) {
  const fs::path a = *base_ / "g1", b = *base_ / "g2", c = *base_ / "g3", e = *base_ / "g4";
  ASSERT_EQ(run("gen --out " + a.string() + kTiny + " --seed 7"), 0);
  ASSERT_EQ(run("gen --out " + b.string() + kTiny, "RFK_SEED=7"), 0);
  ASSERT_EQ(run("gen --out " + c.string() + kTiny, "RFK_SEED=8"), 0);
  ASSERT_EQ(run("gen --out " + e.string() + kTiny + " --seed 7", "RFK_SEED=8"), 0);
  EXPECT_EQ(slurp(a / "manifest.tsv"), slurp(b / "manifest.tsv"));
  EXPECT_EQ(slurp(a / "train/images/c0_000.pgm"), slurp(b / "train/images/c0_000.pgm"));
  EXPECT_NE(slurp(a / "train/images/c0_000.pgm"), slurp(c / "train/images/c0_000.pgm"));
  EXPECT_EQ(slurp(a / "manifest.tsv"), slurp(e / "manifest.tsv"));
}

TEST_F(Cli, TrainIsBitwiseReproducible) {
  const fs::path r = *base_ / "run", r2 = *base_ / "run2";
  ASSERT_TRUE(fs::exists(r / "checkpoint.rfmc"));
  ASSERT_EQ(run("train --data " + (*base_ / "data").string() + " --out " + r2.string() + kTiny + " --steps 3 --refs 2"), 0);
  EXPECT_EQ(slurp(r / "checkpoint.rfmc"), slurp(r2 / "checkpoint.rfmc"));
  EXPECT_EQ(slurp(r / "train_log.tsv"), slurp(r2 / "train_log.tsv"));
  EXPECT_NE(slurp(r / "config.txt").find("fusion.num_refs=2\n"), std::string::npos);
  EXPECT_NE(slurp(r / "config.txt").find("train.steps=3\n"), std::string::npos);
  std::istringstream log(slurp(r / "train_log.tsv"));
  std::string line;
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST_F(Cli, EvalIsReproducible) {
  const std::string ck = (*base_ / "run/checkpoint.rfmc").string(), data = (*base_ / "data").string();
  ASSERT_EQ(run("eval --ckpt " + ck + " --data " + data + " --out " + (*base_ / "e1").string()), 0);
  ASSERT_EQ(run("eval --ckpt " + ck + " --data " + data + " --out " + (*base_ / "e2").string()), 0);
  const std::string rep = slurp(*base_ / "e1/report.txt");
  EXPECT_FALSE(rep.empty());
  EXPECT_EQ(rep, slurp(*base_ / "e2/report.txt"));
  EXPECT_NE(slurp(*base_ / "e1/table.txt").find("image"), std::string::npos);
}

TEST_F(Cli, EvalOfGroundTruthPredictionsIsPerfect) {
  const fs::path data = *base_ / "data", preds = *base_ / "gt_preds";
  fs::create_directories(preds);
  for (const auto& e : fs::directory_iterator(data / "test/masks")) fs::copy_file(e.path(), preds / e.path().filename());
  ASSERT_EQ(run("eval --preds " + preds.string() + " --data " + data.string() + " --out " + (*base_ / "egt").string()), 0);
  const std::string rep = slurp(*base_ / "egt/report.txt");
  const auto value = [&](const std::string& key) {
    const auto at = rep.find("\n" + key + "=");
    if (at == std::string::npos) return -1.0;
    return std::stod(rep.substr(at + key.size() + 2));
  };
  EXPECT_NEAR(value("s_alpha"), 1.0, 1e-9) << rep;
  EXPECT_NEAR(value("adaptive_e"), 1.0, 1e-9);
  EXPECT_NEAR(value("weighted_f"), 1.0, 1e-9);
  EXPECT_EQ(value("mae"), 0.0);
  EXPECT_EQ(run("eval --data " + data.string() + " --out " + (*base_ / "ebad").string()), 1);
}

TEST_F(Cli, PredictWritesOneMapPerImage) {
  const fs::path out = *base_ / "pred";
  ASSERT_EQ(run("predict --ckpt " + (*base_ / "run/checkpoint.rfmc").string() + " --data " + (*base_ / "data").string() +
                " --out " + out.string()),
            0);
  const synth::Split test = synth::load_split((*base_ / "data").string(), "test");
  for (const auto& name : test.names) {
    const Tensor p = synth::read_pgm((out / (name + ".pgm")).string(), 1);
    EXPECT_EQ(p.shape(), (Shape{1, 64, 64}));
  }
}

TEST_F(Cli, DumpFeaturesSpansFullRange) {
  const fs::path out = *base_ / "dump";
  ASSERT_EQ(run("dump-features --ckpt " + (*base_ / "run/checkpoint.rfmc").string() + " --data " +
                (*base_ / "data").string() + " --image c1_000 --out " + out.string()),
            0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    ++files;
    const Tensor h = synth::read_pgm(e.path().string(), 1);
    double lo = 1.0, hi = 0.0;
    for (double v : h.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    EXPECT_EQ(lo, 0.0) << e.path();
    EXPECT_EQ(hi, 1.0) << e.path();
  }
  EXPECT_EQ(files, 12);
  EXPECT_EQ(run("dump-features --ckpt " + (*base_ / "run/checkpoint.rfmc").string() + " --data " +
                (*base_ / "data").string() + " --image nope --out " + out.string()),
            1);
}

TEST_F(Cli, AblateFusionAxisTrainsEveryArm) {
  const fs::path out = *base_ / "abl";
  ASSERT_EQ(run("ablate --axis fusion --data " + (*base_ / "data").string() + " --out " + out.string() + kTiny +
                " --set train.steps=2 --set fusion.num_refs=2"),
            0)
      << last();
  const std::string table = slurp(out / "table.txt");
  for (const char* arm : {"none", "image", "text"}) EXPECT_NE(table.find(arm), std::string::npos) << table;
  EXPECT_TRUE(fs::exists(out / "arm0/checkpoint.rfmc"));
}

TEST_F(Cli, RejectsBadInvocations) {
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("train --out " + (*base_ / "x").string() + " --set nosuch.key=1"), 0);
  EXPECT_NE(last().find("unknown key"), std::string::npos) << last();
  EXPECT_NE(run("train --out " + (*base_ / "x").string() + " --fusion audio"), 0);
  EXPECT_NE(run("ablate --axis colour --out " + (*base_ / "x").string()), 0);
}

}  // namespace
}  // namespace rfm
