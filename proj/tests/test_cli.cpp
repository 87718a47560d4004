#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "changetitans/cli.hpp"
#include "changetitans/pipeline.hpp"

using namespace ctitans;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::set<std::string> tree(const fs::path& root) {
  std::set<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) out.insert(fs::relative(e.path(), root).string());
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / ("changetitans_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root);
    fs::create_directories(root);
  }
  void TearDown() override { fs::remove_all(root); }
  std::string path(const std::string& rel) const { return (root / rel).string(); }
  void write_tiny_config(std::size_t steps) const {
    auto cfg = tiny_config();
    cfg.train.steps = steps;
    std::ofstream(root / "tiny.cfg") << serialize_config(cfg);
  }
  fs::path root;
};

}  // namespace

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"frobnicate"}).code, kExitConfig);
  EXPECT_EQ(run({"--help"}).code, kExitOk);
  EXPECT_EQ(run({"synth"}).code, kExitConfig);  // --out is required
  EXPECT_EQ(run({"synth", "--out", path("d"), "--n", "lots"}).code, kExitConfig);
  EXPECT_EQ(run({"synth", "--out", path("d"), "--size", "40"}).code, kExitConfig);
  auto r = run({"train", "--config", path("missing.cfg"), "--data", path("d"), "--out", path("c")});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("missing.cfg"), std::string::npos);
  std::ofstream(root / "bad.cfg") << "embedding_dimension=oops\n";
  EXPECT_EQ(run({"train", "--config", path("bad.cfg"), "--data", path("d"), "--out", path("c")}).code,
            kExitConfig);
  EXPECT_EQ(run({"eval", "--pred", path("none"), "--gt", path("none2")}).code, kExitConfig);
}

TEST_F(CliTest, SynthIsDeterministicAndConfinedToItsOutput) {
  ASSERT_EQ(run({"synth", "--out", path("a"), "--n", "3", "--seed", "7"}).code, kExitOk);
  ASSERT_EQ(run({"synth", "--out", path("b"), "--n", "3", "--seed", "7"}).code, kExitOk);
  EXPECT_EQ(tree(root), (std::set<std::string>{"a", "b", "a/A", "a/B", "a/label", "b/A", "b/B", "b/label",
                                               "a/A/0000.ppm", "a/A/0001.ppm", "a/A/0002.ppm",
                                               "a/B/0000.ppm", "a/B/0001.ppm", "a/B/0002.ppm",
                                               "a/label/0000.pgm", "a/label/0001.pgm", "a/label/0002.pgm",
                                               "b/A/0000.ppm", "b/A/0001.ppm", "b/A/0002.ppm",
                                               "b/B/0000.ppm", "b/B/0001.ppm", "b/B/0002.ppm",
                                               "b/label/0000.pgm", "b/label/0001.pgm", "b/label/0002.pgm"}));
  for (const auto& f : tree(root / "a")) {
    if (fs::is_regular_file(root / "a" / f)) {
      EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
    }
  }
  ASSERT_EQ(run({"synth", "--out", path("c"), "--n", "3", "--seed", "8"}).code, kExitOk);
  EXPECT_NE(slurp(root / "a/A/0000.ppm"), slurp(root / "c/A/0000.ppm"));
}

TEST_F(CliTest, EvalOnIdenticalMasksIsPerfect) {
  ASSERT_EQ(run({"synth", "--out", path("d"), "--n", "4"}).code, kExitOk);
  auto r = run({"eval", "--pred", path("d/label"), "--gt", path("d/label")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::istringstream is(r.out);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "# changetitans metrics csv v1");
  std::getline(is, line);
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    EXPECT_NE(line.find(",1,1,1,1,1,1,0,2,3,0"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 4);
  auto w = run({"eval", "--pred", path("d/label"), "--gt", path("d/label"), "--out", path("m.csv")});
  ASSERT_EQ(w.code, kExitOk);
  EXPECT_NE(w.out.find("pairs=4"), std::string::npos);
  EXPECT_NE(w.out.find("hausdorff=0"), std::string::npos);
  EXPECT_TRUE(fs::exists(root / "m.csv"));
}

TEST_F(CliTest, TrainInferEvalRoundTrip) {
  write_tiny_config(2);
  ASSERT_EQ(run({"synth", "--out", path("d"), "--n", "2"}).code, kExitOk);
  auto t = run({"train", "--config", path("tiny.cfg"), "--data", path("d"), "--out", path("ck"),
                "--log-every", "1"});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  EXPECT_NE(t.out.find("step 2/2"), std::string::npos);
  EXPECT_NE(t.out.find("train_f1="), std::string::npos);
  for (const char* f : {"checkpoint.txt", "config.txt", "weights.tcdt", "optimizer.tcdt", "loss.csv"})
    EXPECT_TRUE(fs::exists(root / "ck" / f)) << f;

  auto r = run({"train", "--config", path("tiny.cfg"), "--data", path("d"), "--out", path("ck2"),
                "--resume", path("ck"), "--steps", "3", "--log-every", "0"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(slurp(root / "ck2/checkpoint.txt").find("3"), std::string::npos);

  auto i = run({"infer", "--checkpoint", path("ck"), "--data", path("d"), "--out", path("pred")});
  ASSERT_EQ(i.code, kExitOk) << i.err;
  EXPECT_EQ(tree(root / "pred"),
            (std::set<std::string>{"0000.pgm", "0000.prob.tcdt", "0001.pgm", "0001.prob.tcdt"}));
  auto one = run({"infer", "--checkpoint", path("ck"), "--t1", path("d/A/0001.ppm"), "--t2",
                  path("d/B/0001.ppm"), "--id", "x", "--out", path("single")});
  ASSERT_EQ(one.code, kExitOk) << one.err;
  EXPECT_EQ(slurp(root / "single/x.pgm"), slurp(root / "pred/0001.pgm"));

  EXPECT_EQ(run({"eval", "--pred", path("pred"), "--gt", path("d/label")}).code, kExitOk);
  EXPECT_EQ(run({"infer", "--checkpoint", path("ck"), "--out", path("x")}).code, kExitConfig);
}

TEST_F(CliTest, ChannelMismatchIsAUsageError) {
  write_tiny_config(1);
  ASSERT_EQ(run({"synth", "--out", path("g"), "--n", "1", "--channels", "1"}).code, kExitOk);
  auto r = run({"train", "--config", path("tiny.cfg"), "--data", path("g"), "--out", path("ck")});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_FALSE(fs::exists(root / "ck" / "weights.tcdt"));
}

TEST_F(CliTest, AblateWritesOneRowPerVariant) {
  write_tiny_config(1);
  ASSERT_EQ(run({"synth", "--out", path("d"), "--n", "1"}).code, kExitOk);
  auto r = run({"ablate", "--config", path("tiny.cfg"), "--data", path("d"), "--variants", "sum,siam_diff",
                "--steps", "1", "--out", path("ab.csv")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  std::istringstream is(slurp(root / "ab.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "# changetitans ablation csv v1");
  EXPECT_EQ(lines[2].rfind("sum,1,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("siam_diff,1,", 0), 0u);
  EXPECT_EQ(run({"ablate", "--config", path("tiny.cfg"), "--data", path("d"), "--variants", "nope"}).code,
            kExitConfig);
}

TEST_F(CliTest, GradcheckPasses) {
  auto r = run({"gradcheck"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("passed"), std::string::npos);
}

TEST(CliThreads, EnvironmentCapsWorkers) {
  ::setenv("TCD_THREADS", "1", 1);
  EXPECT_EQ(worker_threads(), 1u);
  ::setenv("TCD_THREADS", "0", 1);
  const unsigned fallback = worker_threads();
  EXPECT_GE(fallback, 1u);
  ::setenv("TCD_THREADS", "abc", 1);
  EXPECT_EQ(worker_threads(), fallback);
  ::setenv("TCD_THREADS", "100000", 1);
  EXPECT_LE(worker_threads(), std::max(1u, std::thread::hardware_concurrency()));
  ::unsetenv("TCD_THREADS");
}
