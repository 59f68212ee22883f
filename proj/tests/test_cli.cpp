#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "clover/archive.hpp"
#include "clover/cli.hpp"
#include "clover/model_io.hpp"
#include "clover/synthetic.hpp"
#include "clover/transform.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "clover");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = clover::cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("clover_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }

  fs::path dir;
};

}  // namespace

TEST_F(CliTest, GenTransformVerifyPipeline) {
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "16", "--h", "2", "--d", "4", "--seed", "3", "--bias"}).code, 0);
  ASSERT_EQ(run({"transform", path("w.clv"), path("f.clv"), "--mode", "svd"}).code, 0);
  const CliRun v = run({"verify", path("w.clv"), path("f.clv"), "--tol", "1e-10", "--mask", "causal"});
  EXPECT_EQ(v.code, 0) << v.out << v.err;
  EXPECT_NE(v.out.find("seed: 0"), std::string::npos);
  EXPECT_NE(v.out.find("PASS"), std::string::npos);
  EXPECT_EQ(run({"verify", path("w.clv"), path("f.clv"), "--mask", "window:3", "--seed", "9"}).code, 0);
}

TEST_F(CliTest, QrTransformVerifiesWithRope) {
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "16", "--h", "2", "--d", "4", "--seed", "4"}).code, 0);
  ASSERT_EQ(run({"transform", path("w.clv"), path("f.clv"), "--mode", "qr"}).code, 0);
  EXPECT_EQ(run({"verify", path("w.clv"), path("f.clv"), "--rope"}).code, 0);
  ASSERT_EQ(run({"transform", path("w.clv"), path("s.clv"), "--mode", "svd"}).code, 0);
  const CliRun bad = run({"verify", path("w.clv"), path("s.clv"), "--rope"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("RoPE"), std::string::npos) << bad.err;
}

TEST_F(CliTest, PerturbedFactorsFailVerify) {
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "16", "--h", "2", "--d", "4", "--seed", "5"}).code, 0);
  ASSERT_EQ(run({"transform", path("w.clv"), path("f.clv")}).code, 0);
  auto f = clover::load_factors(path("f.clv"));
  f.s_vo(0, 0) += 1e-3;
  clover::write_archive(path("bad.clv"), clover::factors_to_archive(f));
  const CliRun v = run({"verify", path("w.clv"), path("bad.clv")});
  EXPECT_EQ(v.code, 1);
  EXPECT_NE(v.out.find("FAIL"), std::string::npos);
}

TEST_F(CliTest, CountParams) {
  const CliRun lora = run({"count-params", "--D", "4096", "--h", "32", "--d", "128", "--method", "lora:64"});
  EXPECT_EQ(lora.code, 0);
  EXPECT_NE(lora.out.find("trainable: 1572864 (1,572,864)"), std::string::npos) << lora.out;
  EXPECT_NE(lora.out.find("formula: "), std::string::npos);
  const CliRun clover = run({"count-params", "--D", "4096", "--h", "32", "--d", "128", "--method", "clover"});
  EXPECT_NE(clover.out.find("trainable: 1052672 (1,052,672)"), std::string::npos) << clover.out;
  EXPECT_NE(clover.out.find("alternate reading"), std::string::npos);
  const CliRun full = run({"count-params", "--D", "8", "--h", "2", "--d", "4", "--method", "full"});
  EXPECT_NE(full.out.find("trainable: 256"), std::string::npos);
}

TEST_F(CliTest, PruneMatchesInProcess) {
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "16", "--h", "2", "--d", "8", "--heads-rank", "4", "--seed", "6"}).code, 0);
  ASSERT_EQ(run({"transform", path("w.clv"), path("f.clv")}).code, 0);
  const CliRun p = run({"prune", path("f.clv"), path("p.clv"), "--threshold-qk", "5e-3", "--threshold-vo", "6e-3", "--csv",
                     path("p.csv")});
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_NE(p.out.find("reduction 50%"), std::string::npos) << p.out;

  const auto r = clover::prune_factors(clover::load_factors(path("f.clv")), 5e-3, 6e-3);
  std::ostringstream csv;
  clover::write_prune_csv(csv, r.stats);
  EXPECT_EQ(slurp(path("p.csv")), csv.str());
  EXPECT_EQ(slurp(path("p.clv")), clover::encode_archive(clover::factors_to_archive(r.factors)));
  EXPECT_EQ(run({"verify", path("w.clv"), path("p.clv")}).code, 0);
}

TEST_F(CliTest, SpectrumAndMergeMatchInProcess) {
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "8", "--h", "2", "--d", "4", "--seed", "7"}).code, 0);
  ASSERT_EQ(run({"spectrum", path("w.clv"), "--csv", path("s.csv")}).code, 0);
  const auto w = clover::load_plain_weights(path("w.clv"));
  std::ostringstream csv;
  clover::write_spectrum_csv(csv, clover::spectrum_report(w));
  EXPECT_EQ(slurp(path("s.csv")), csv.str());

  ASSERT_EQ(run({"transform", path("w.clv"), path("f.clv")}).code, 0);
  ASSERT_EQ(run({"merge", path("f.clv"), path("m.clv")}).code, 0);
  EXPECT_EQ(slurp(path("m.clv")),
            clover::encode_archive(clover::weights_to_archive(clover::merge_back(clover::decompose_factors(w)))));
  EXPECT_EQ(run({"verify", path("m.clv"), path("f.clv")}).code, 0);
  EXPECT_EQ(run({"inspect", path("m.clv")}).code, 0);
  EXPECT_EQ(run({"inspect", path("f.clv")}).code, 0);
}

TEST_F(CliTest, TrainToyMatchesInProcess) {
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "8", "--h", "2", "--d", "4", "--seed", "8"}).code, 0);
  ASSERT_EQ(run({"transform", path("w.clv"), path("f.clv")}).code, 0);
  const CliRun t = run({"train-toy", path("f.clv"), "--task", "regress", "--steps", "20", "--lr", "1e-2", "--seed", "2",
                     "--out", path("t.clv"), "--loss-csv", path("loss.csv")});
  ASSERT_EQ(t.code, 0) << t.err;

  const auto f = clover::load_factors(path("f.clv"));
  const auto task = clover::make_toy_task(clover::ToyKind::sequence_regression, 2, {2, 8, 8}, f);
  clover::TrainConfig config;
  config.steps = 20;
  const auto state = clover::train_toy(f, task, config);
  EXPECT_EQ(slurp(path("t.clv")), clover::encode_archive(clover::train_state_to_archive(state, task, config)));
  std::ostringstream csv;
  clover::write_loss_csv(csv, state.history);
  EXPECT_EQ(slurp(path("loss.csv")), csv.str());
  EXPECT_EQ(run({"inspect", path("t.clv")}).code, 0);
  EXPECT_EQ(run({"merge", path("t.clv"), path("m.clv")}).code, 0);

  EXPECT_EQ(run({"train-toy", path("f.clv"), "--task", "recall", "--steps", "5", "--out", path("r.clv")}).code, 0);
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"count-params", "--D", "8", "--h", "2", "--d", "4", "--bogus"}).code, 2);
  EXPECT_EQ(run({"count-params", "--D", "8", "--h", "2"}).code, 2);
  EXPECT_EQ(run({"count-params", "--D", "8", "--h", "2", "--d", "4", "--method", "pissa"}).code, 2);
  EXPECT_EQ(run({"transform", "a", "b", "--mode", "lu"}).code, 2);
  EXPECT_EQ(run({"verify", "a", "b", "--mask", "window:0"}).code, 2);
  EXPECT_EQ(run({"prune", "a", "b", "--threshold-qk", "-1", "--threshold-vo", "0"}).code, 2);
  const CliRun r = run({"gen"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, OperationFailuresExitOne) {
  EXPECT_EQ(run({"inspect", path("missing.clv")}).code, 1);
  std::ofstream(path("junk.clv")) << "not an archive";
  const CliRun r = run({"transform", path("junk.clv"), path("out.clv")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  ASSERT_EQ(run({"gen", path("w.clv"), "--D", "8", "--h", "2", "--d", "4", "--bias"}).code, 0);
  EXPECT_EQ(run({"transform", path("w.clv"), path("q.clv"), "--mode", "qr"}).code, 1);
  EXPECT_EQ(run({"gen", path("x.clv"), "--D", "4", "--h", "1", "--d", "8"}).code, 1);
}

TEST_F(CliTest, BinaryExitCodes) {
  auto status = [&](const std::string& args) {
    const int raw = std::system((std::string(CLOVER_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  EXPECT_EQ(status("gen " + path("w.clv") + " --D 16 --h 2 --d 4 --seed 1"), 0);
  EXPECT_EQ(status("transform " + path("w.clv") + " " + path("f.clv") + " --mode svd"), 0);
  EXPECT_EQ(status("verify " + path("w.clv") + " " + path("f.clv") + " --tol 1e-10"), 0);
  EXPECT_EQ(status("verify " + path("w.clv") + " " + path("f.clv") + " --tol 0 --seed 3 --batch 1"), 1);
  EXPECT_EQ(status("verify " + path("w.clv") + " --nope"), 2);
}
