#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ann/bench.hpp"
#include "ann/blocks.hpp"
#include "ann/cli.hpp"
#include "ann/config.hpp"
#include "ann/rng.hpp"
#include "ann/tensor_io.hpp"

using namespace ann;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("ann_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write_config(const json& j, const std::string& name = "config.json") {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  Result run(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
  }

  Result run(const std::string& command, const json& cfg, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{command, "--config", write_config(cfg).string()};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }

  fs::path dir_;
};

json nb_config() { return {{"block", "nb"}, {"shape", {{"C", 2}, {"H", 4}, {"W", 4}}}, {"seed", 1}}; }

json afnb_config() {
  return {{"block", "afnb"},
          {"shape", {{"C", 2}, {"H", 3}, {"W", 3}}},
          {"low_shape", {{"C", 3}, {"H", 6}, {"W", 5}}},
          {"sampler", {{"method", "pyramid_average"}, {"levels", {1, 2}}}},
          {"seed", 4}};
}

}  // namespace

TEST_F(CliTest, DemoNbPassesRowSumCheck) {
  const Result r = run("demo", nb_config(), {"--out", (dir_ / "y.annt").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("attention row-sum check: PASS"), std::string::npos) << r.out;
  // concat combine: (out + C) x H x W
  EXPECT_NE(r.out.find("output shape 4x4x4"), std::string::npos) << r.out;
}

TEST_F(CliTest, DemoWritesTheForwardResult) {
  json cfg = afnb_config();
  cfg["output"] = (dir_ / "from_config.annt").string();
  ASSERT_EQ(run("demo", cfg).code, 0);
  const Tensor written = read_tensor_file(dir_ / "from_config.annt");

  const ExperimentConfig c = parse_config(cfg);
  const Tensor x = seeded_fill(c.shape.dims(), derive_seed(c.seed, 1), Distribution::uniform_pm1);
  const Tensor low = seeded_fill(c.low_shape->dims(), derive_seed(c.seed, 2), Distribution::uniform_pm1);
  const Tensor want = afnb_forward({x, low}, c.block_config, init_weights(c.block_config, derive_seed(c.seed, 3)));
  EXPECT_EQ(written, want);

  ASSERT_EQ(run("demo", cfg, {"--out", (dir_ / "again.annt").string()}).code, 0);
  EXPECT_EQ(read_tensor_file(dir_ / "again.annt"), written);
}

TEST_F(CliTest, DemoSkipsRowSumWithoutNormalization) {
  json cfg = nb_config();
  cfg["normalization"] = "none";
  cfg["combine"] = "residual";
  const Result r = run("demo", cfg);
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("SKIP"), std::string::npos);
  EXPECT_NE(r.out.find("output shape 2x4x4"), std::string::npos);
}

TEST_F(CliTest, ConfigErrorsExitTwoNamingTheField) {
  json empty_levels = nb_config();
  empty_levels["block"] = "apnb";
  empty_levels["sampler"] = {{"method", "pyramid_average"}, {"levels", json::array()}};
  Result r = run("demo", empty_levels);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("levels"), std::string::npos) << r.err;

  json unknown = nb_config();
  unknown["colour"] = "blue";
  r = run("demo", unknown);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("colour"), std::string::npos) << r.err;

  json fusion = nb_config();
  fusion["block"] = "fnb";
  r = run("demo", fusion);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("low_shape"), std::string::npos) << r.err;

  json residual = nb_config();
  residual["combine"] = "residual";
  residual["out_channels"] = 3;
  r = run("demo", residual);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("out_channels"), std::string::npos) << r.err;

  json method = nb_config();
  method["sampler"] = {{"method", "bilinear"}, {"levels", {2}}};
  r = run("demo", method);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("sampler.method"), std::string::npos) << r.err;
}

TEST_F(CliTest, UsageErrors) {
  EXPECT_EQ(run(std::vector<std::string>{}).code, 2);
  EXPECT_EQ(run({"demo"}).code, 2);
  EXPECT_EQ(run({"launch", "--config", "x.json"}).code, 2);
  EXPECT_EQ(run({"demo", "--config", (dir_ / "missing.json").string()}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
  std::ofstream(dir_ / "broken.json") << "{ not json";
  EXPECT_EQ(run({"demo", "--config", (dir_ / "broken.json").string()}).code, 2);
}

TEST_F(CliTest, EquivalenceApnbAndAfnb) {
  json apnb = nb_config();
  apnb["block"] = "apnb";
  Result r = run("equivalence", apnb);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("apnb(identity sampler) vs nb: 50 cases"), std::string::npos) << r.out;
  r = run("equivalence", afnb_config());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("afnb(identity sampler) vs fnb"), std::string::npos) << r.out;
}

TEST_F(CliTest, EquivalenceNegativeControlFails) {
  json cfg = nb_config();
  cfg["block"] = "apnb";
  cfg["equivalence"] = {{"cases", 5}, {"corrupt", true}};
  const Result r = run("equivalence", cfg);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("case seed"), std::string::npos) << r.out;
  EXPECT_EQ(run("equivalence", nb_config()).code, 2);
}

TEST_F(CliTest, FlopsReferenceTable) {
  const Result r = run({"flops", "--table1"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("block,H,W,estimated_gmacs,reported_gmacs,relative_error,tolerance,status\n", 0), 0u);
  EXPECT_NE(r.out.find("nb,96,96,57.9"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("reported"), std::string::npos);
}

TEST_F(CliTest, FlopsSweepPrintsAnchorsAndRatio) {
  json cfg = {{"block", "apnb"},
              {"shape", {{"C", 64}, {"H", 256}, {"W", 128}}},
              {"embed_channels", 32},
              {"sampler", {{"method", "pyramid_average"}, {"levels", {1, 3, 6, 8}}}},
              {"sweep", {{"shapes", {{{"H", 96}, {"W", 96}}, {{"H", 256}, {"W", 128}}}}, {"blocks", {"nb", "apnb"}}}}};
  Result r = run("flops", cfg);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("apnb,256,128,64,32,110,"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find(",297.8909"), std::string::npos) << r.out;

  r = run("flops", cfg, {"--out", (dir_ / "cost.json").string()});
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(std::ifstream(dir_ / "cost.json"));
  ASSERT_EQ(j.size(), 4u);
  EXPECT_EQ(j[3]["S"], 110);
  EXPECT_EQ(j[3]["complexity_ratio"]["num"], 55);
  EXPECT_EQ(j[3]["complexity_ratio"]["den"], 16384);
  EXPECT_EQ(json::parse(j.dump()), j);
}

TEST_F(CliTest, GradcheckSmallBlocksPass) {
  json nb = {{"block", "nb"}, {"shape", {{"C", 2}, {"H", 3}, {"W", 3}}}, {"seed", 2}};
  Result r = run("gradcheck", nb, {"--out", (dir_ / "grad.json").string()});
  EXPECT_EQ(r.code, 0) << r.out;
  const json j = json::parse(std::ifstream(dir_ / "grad.json"));
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_LT(j["max_rel_error"].get<double>(), 1e-4);
  EXPECT_FALSE(j["tensors"].empty());

  json apnb = nb;
  apnb["block"] = "apnb";
  apnb["shape"] = {{"C", 2}, {"H", 4}, {"W", 4}};
  apnb["sampler"] = {{"method", "pyramid_average"}, {"levels", {1, 2}}};
  EXPECT_EQ(run("gradcheck", apnb).code, 0);
}

TEST_F(CliTest, GradcheckRejectsLargeShapes) {
  json big = {{"block", "nb"}, {"shape", {{"C", 8}, {"H", 32}, {"W", 32}}}};
  const Result r = run("gradcheck", big);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("shape:", 0), 0u) << r.err;
}

TEST_F(CliTest, BenchSingleBlockHasSevenPhaseRows) {
  json cfg = nb_config();
  cfg["bench"] = {{"blocks", {"apnb"}}, {"csv", (dir_ / "phases.csv").string()}};
  const Result r = run("bench", cfg, {"--out", (dir_ / "bench.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(std::ifstream(dir_ / "bench.json"));
  ASSERT_EQ(j["reports"].size(), 1u);
  EXPECT_EQ(j["reports"][0]["phases"].size(), 7u);
  EXPECT_TRUE(j["comparisons"].empty());
  EXPECT_EQ(json::parse(j.dump()), j);
  std::ifstream csv(dir_ / "phases.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 1u + 8 * 3);
}

TEST_F(CliTest, BenchDefaultPairComparesBlocks) {
  const Result r = run("bench", nb_config(), {"--out", (dir_ / "bench.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(std::ifstream(dir_ / "bench.json"));
  ASSERT_EQ(j["reports"].size(), 2u);
  EXPECT_EQ(j["reports"][0]["block"], "nb");
  EXPECT_EQ(j["reports"][1]["block"], "apnb");
  ASSERT_EQ(j["comparisons"].size(), 1u);
  EXPECT_NE(r.out.find("speedup"), std::string::npos);
}

TEST_F(CliTest, BenchThreadOverride) {
  const fs::path out = dir_ / "bench.json";
  ::setenv("ANN_THREADS", "3", 1);
  Result r = run("bench", nb_config(), {"--out", out.string()});
  ::unsetenv("ANN_THREADS");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(std::ifstream(out))["reports"][0]["environment"]["threads"], 3);

  ::setenv("ANN_THREADS", "4x", 1);
  r = run("bench", nb_config());
  ::unsetenv("ANN_THREADS");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ANN_THREADS"), std::string::npos);
}

TEST_F(CliTest, BenchInvalidIterationsExitTwo) {
  json cfg = nb_config();
  cfg["bench"] = {{"measured", 2}};
  EXPECT_EQ(run("bench", cfg).code, 2);
}

TEST_F(CliTest, BenchFullSizeFailsPreflight) {
  json cfg = {{"block", "nb"}, {"shape", {{"C", 64}, {"H", 256}, {"W", 128}}}, {"embed_channels", 32}};
  const auto available = available_memory_bytes();
  BenchSpec full;
  full.shape = {2048, 256, 128};
  full.cfg.in_channels = 2048;
  full.cfg.embed_channels = 256;
  full.query_block = full.shape.positions();
  if (!available || *available >= required_bytes(full)) GTEST_SKIP() << "machine has enough memory for --full";
  const Result r = run("bench", cfg, {"--full"});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("preflight: nb needs ", 0), 0u) << r.err;
}
