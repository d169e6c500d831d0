#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "hear/encoder.hpp"
#include "hear/run_config.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("hear_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(HEAR_CLI_PATH) + " " + args + " > " +
                          (work_dir() / "last.log").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::size_t count_sentences(const fs::path& p) { return hear::read_conll(p.string()).size(); }

std::string path(const std::string& rel) { return (work_dir() / rel).string(); }

// Tiny dataset and encoder shared by the slower tests.
class Trained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ASSERT_EQ(run_cli("gen-data --task lookahead --sentences 120 --max-sentence-length 10 --seed 3 --out " +
                   path("tiny")),
              0);
    ASSERT_EQ(run_cli("train-encoder --train " + path("tiny/train.conll") + " --dev " +
                   path("tiny/dev.conll") + " --epochs 2 --d-model 16 --d-ffn 32 --out " +
                   path("enc")),
              0);
  }
  static std::string data_args() {
    return "--encoder " + path("enc/encoder") + " --data " + path("tiny/test.conll");
  }
};

}  // namespace

TEST(GenData, SplitsAndDeterminism) {
  ASSERT_EQ(run_cli("gen-data --task lookahead --sentences 100 --seed 7 --out " + path("g1")), 0);
  ASSERT_EQ(run_cli("gen-data --task lookahead --sentences 100 --seed 7 --out " + path("g2")), 0);
  EXPECT_EQ(count_sentences(path("g1/train.conll")), 80u);
  EXPECT_EQ(count_sentences(path("g1/dev.conll")), 10u);
  EXPECT_EQ(count_sentences(path("g1/test.conll")), 10u);
  for (const char* f : {"train.conll", "dev.conll", "test.conll", "manifest.json"})
    EXPECT_EQ(slurp(path("g1/") + f), slurp(path("g2/") + f)) << f;
  auto cfg = read_json(path("g1/config.json"));
  EXPECT_EQ(cfg["seed"], 7);
  EXPECT_EQ(read_json(path("g1/manifest.json"))["splits"]["train"]["sentences"], 80);
}

TEST(GenData, InvalidTaskFails) {
  EXPECT_NE(run_cli("gen-data --task nonsense --out " + path("bad")), 0);
  EXPECT_NE(slurp(path("last.log")).find("nonsense"), std::string::npos);
}

TEST(GenData, UnknownConfigKeyFails) {
  std::ofstream(path("bad.json")) << R"({"sentences": 10, "learning_rate": 0.1})";
  EXPECT_EQ(run_cli("gen-data --config " + path("bad.json") + " --out " + path("bad2")), 2);
  EXPECT_NE(slurp(path("last.log")).find("learning_rate"), std::string::npos);
}

TEST(GenData, SeedEnvironmentOverridesConfig) {
  std::ofstream(path("seed.json")) << R"({"sentences": 30, "seed": 1})";
  ASSERT_EQ(run_cli("gen-data --config " + path("seed.json") + " --out " + path("s1")), 0);
  ASSERT_EQ(run_cli("gen-data --config " + path("seed.json") + " --out " + path("s2"), "HEAR_SEED=99"), 0);
  EXPECT_EQ(read_json(path("s2/config.json"))["seed"], 99);
  EXPECT_NE(slurp(path("s1/train.conll")), slurp(path("s2/train.conll")));
  // An explicit flag beats both.
  ASSERT_EQ(run_cli("gen-data --config " + path("seed.json") + " --seed 1 --out " + path("s3"), "HEAR_SEED=99"), 0);
  EXPECT_EQ(slurp(path("s1/train.conll")), slurp(path("s3/train.conll")));
}

TEST(TrainEncoder, SmokeAndDeterministicFirstEpoch) {
  ASSERT_EQ(run_cli("gen-data --task local --sentences 12 --seed 5 --out " + path("t10")), 0);
  const std::string args = "train-encoder --train " + path("t10/train.conll") + " --dev " +
                           path("t10/dev.conll") + " --epochs 1 --d-model 16 --d-ffn 32 --out ";
  ASSERT_EQ(run_cli(args + path("te1")), 0);
  ASSERT_EQ(run_cli(args + path("te2")), 0);
  for (const char* f : {"encoder.json", "encoder.bin", "train_log.jsonl", "config.json"})
    EXPECT_TRUE(fs::exists(path("te1/") + f)) << f;
  auto log1 = nlohmann::json::parse(slurp(path("te1/train_log.jsonl")));
  auto log2 = nlohmann::json::parse(slurp(path("te2/train_log.jsonl")));
  EXPECT_TRUE(std::isfinite(log1["loss_bi"].get<double>()));
  EXPECT_TRUE(std::isfinite(log1["loss_uni"].get<double>()));
  EXPECT_EQ(log1["loss_bi"].get<double>(), log2["loss_bi"].get<double>());
  EXPECT_EQ(log1["loss_uni"].get<double>(), log2["loss_uni"].get<double>());
  EXPECT_EQ(slurp(path("te1/encoder.bin")), slurp(path("te2/encoder.bin")));
}

TEST(TrainEncoder, MissingDataFails) {
  EXPECT_EQ(run_cli("train-encoder --train /nonexistent.conll --dev /nonexistent.conll --out " + path("x")), 1);
}

TEST_F(Trained, FixedOneMatchesEvery) {
  ASSERT_EQ(run_cli("eval-stream " + data_args() + " --policy every --out " + path("ev_every")), 0);
  ASSERT_EQ(run_cli("eval-stream " + data_args() + " --policy fixed:1 --jobs 3 --out " + path("ev_f1")), 0);
  EXPECT_EQ(slurp(path("ev_every/report.json")), slurp(path("ev_f1/report.json")));
  EXPECT_EQ(slurp(path("ev_every/transcripts.jsonl")), slurp(path("ev_f1/transcripts.jsonl")));
}

TEST_F(Trained, OracleDominatesEvery) {
  ASSERT_EQ(run_cli("eval-stream " + data_args() + " --policy every --out " + path("ev_every2")), 0);
  ASSERT_EQ(run_cli("eval-stream " + data_args() + " --policy oracle --out " + path("ev_oracle")), 0);
  EXPECT_GE(read_json(path("ev_oracle/report.json"))["streaming_em"].get<double>(),
            read_json(path("ev_every2/report.json"))["streaming_em"].get<double>());
}

TEST_F(Trained, ReportSchema) {
  ASSERT_EQ(run_cli("eval-stream " + data_args() + " --policy fixed:3 --out " + path("ev_f3")), 0);
  auto r = read_json(path("ev_f3/report.json"));
  for (const char* key : {"offline_f1", "streaming_em", "eo", "rc", "gflops_per_example",
                          "restarts_per_example", "n_sentences"})
    EXPECT_TRUE(r.contains(key)) << key;
  EXPECT_EQ(r.size(), 7u);
  EXPECT_EQ(r["n_sentences"], 12);
  EXPECT_TRUE(fs::exists(path("ev_f3/config.json")));
}

TEST_F(Trained, MalformedPolicyIsUsageError) {
  EXPECT_EQ(run_cli("eval-stream " + data_args() + " --policy fixed:zero --out " + path("ev_bad")), 2);
  EXPECT_NE(slurp(path("last.log")).find("Usage"), std::string::npos);
}

TEST_F(Trained, TrainArmWritesGridSelection) {
  const auto before = slurp(path("enc/encoder.bin"));
  ASSERT_EQ(run_cli("train-arm --encoder " + path("enc/encoder") + " --train " +
                 path("tiny/train.conll") + " --dev " + path("tiny/dev.conll") +
                 " --arm-epochs 1 --d-arm 8 --out " + path("arm")),
            0);
  EXPECT_EQ(slurp(path("enc/encoder.bin")), before);
  auto header = read_json(path("arm/arm.json"));
  const auto alpha = header["config"]["alpha"].get<std::size_t>();
  const auto beta = header["config"]["beta"].get<std::size_t>();
  const std::set<std::size_t> grid = {0, 1, 2, 3, 5, 10};
  EXPECT_TRUE(grid.count(alpha));
  EXPECT_TRUE(grid.count(beta));
  EXPECT_LT(alpha, beta);
  auto report = read_json(path("arm/arm_report.json"));
  EXPECT_EQ(report["grid"].size(), 30u);
  EXPECT_EQ(report["encoder_checksum"].get<std::uint64_t>(),
            hear::load_encoder(path("enc/encoder")).model.params().checksum());
  EXPECT_TRUE(report["intrinsic_dev"].contains("f1"));

  ASSERT_EQ(run_cli("eval-stream " + data_args() + " --policy arm:" + path("arm/arm") + " --out " +
                 path("ev_arm")),
            0);
  EXPECT_EQ(read_json(path("ev_arm/report.json"))["n_sentences"], 12);
}

TEST_F(Trained, TrainArmDimensionMismatchIsConfigError) {
  std::ofstream(path("wide.json")) << R"({"d_model": 32})";
  EXPECT_EQ(run_cli("train-arm --config " + path("wide.json") + " --encoder " + path("enc/encoder") +
                 " --train " + path("tiny/train.conll") + " --dev " + path("tiny/dev.conll") +
                 " --out " + path("arm_bad")),
            2);
  ASSERT_EQ(run_cli("train-encoder --train " + path("tiny/train.conll") + " --dev " +
                 path("tiny/dev.conll") + " --epochs 1 --d-model 16 --d-ffn 32 --uni-layers 2 "
                 "--bi-layers 0 --out " + path("enc_uni")),
            0);
  EXPECT_EQ(run_cli("train-arm --encoder " + path("enc_uni/encoder") + " --train " +
                 path("tiny/train.conll") + " --dev " + path("tiny/dev.conll") + " --out " +
                 path("arm_bad2")),
            2);
}

TEST(BenchFlops, OrderingAndRatios) {
  ASSERT_EQ(run_cli("bench-flops --lengths 1,8,16,32,64 --out " + path("bf")), 0);
  auto j = read_json(path("bf/bench_flops.json"));
  ASSERT_EQ(j["rows"].size(), 5u);
  for (const auto& row : j["rows"]) {
    const auto& f = row["flops"];
    ASSERT_EQ(f.size(), 5u);
    const double lo = f[0]["flops"].get<double>(), hi = f[4]["flops"].get<double>();
    if (row["length"] == 1) {
      // One token: a restart costs the same as a causal step.
      EXPECT_LE(hi, 2 * lo);
      continue;
    }
    for (std::size_t b = 1; b < f.size(); ++b)
      EXPECT_GT(f[b]["flops"].get<double>(), f[b - 1]["flops"].get<double>());
    if (row["length"] == 32) {
      EXPECT_LT(f[2]["flops"].get<double>() / hi, 0.75);
    }
  }
  EXPECT_NE(slurp(path("last.log")).find("b=4"), std::string::npos);
}
