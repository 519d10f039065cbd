#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;

const std::string kCli = GCB_CLI_PATH;
const std::string kSmall = std::string(GCB_CONFIG_DIR) + "/small.json";

struct Result {
  int code;
  std::string output;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("gcb_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path dir(const std::string& name) const { return root_ / name; }

  Result run(const std::string& args, const std::string& env = "") const {
    const fs::path log = root_ / "last.log";
    const std::string cmd = env + " " + kCli + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
  }

  Result run_small(const std::string& sub, const fs::path& out, const std::string& extra = "") const {
    return run(sub + " --config " + kSmall + " --out " + out.string() + " " + extra);
  }

  nlohmann::json json_at(const fs::path& p) const { return nlohmann::json::parse(slurp(p)); }

  fs::path root_;
};

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("no-such-command").code, 1);
  EXPECT_EQ(run("gen-data --bogus-flag").code, 1);
  EXPECT_EQ(run("probe --mode phi-nn").code, 1);  // missing checkpoint
  EXPECT_EQ(run("eval --mode sideways").code, 1);
  EXPECT_EQ(run("oracle-metric --w 3").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, InvalidConfigListsEveryViolation) {
  const fs::path cfg = dir("bad.json");
  std::ofstream(cfg) << R"({"env": {"grid_size": 0}, "rl": {"quantile": 2.0}, "unknown_section": 1})";
  const Result r = run("gen-data --config " + cfg.string() + " --out " + dir("o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("validation error"), std::string::npos);
  EXPECT_NE(r.output.find("unknown_section"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir("o") / "dataset.jsonl"));
}

TEST_F(Cli, RuntimeFailureExitsTwo) {
  const Result r = run("probe --checkpoint " + dir("missing.ckpt").string() + " --mode phi-nn --config " +
                       kSmall + " --out " + dir("o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("error"), std::string::npos);
}

TEST_F(Cli, GenDataIsByteIdenticalPerSeed) {
  ASSERT_EQ(run_small("gen-data", dir("a")).code, 0);
  ASSERT_EQ(run_small("gen-data", dir("b")).code, 0);
  ASSERT_EQ(run_small("gen-data", dir("c"), "--seed 5").code, 0);
  EXPECT_EQ(slurp(dir("a") / "dataset.jsonl"), slurp(dir("b") / "dataset.jsonl"));
  EXPECT_EQ(slurp(dir("a") / "config.json"), slurp(dir("b") / "config.json"));
  EXPECT_NE(slurp(dir("a") / "dataset.jsonl"), slurp(dir("c") / "dataset.jsonl"));
  const auto cfg = json_at(dir("a") / "config.json");
  EXPECT_TRUE(cfg.contains("config_hash"));
  EXPECT_TRUE(cfg.contains("version"));
  EXPECT_GT(cfg.at("resolved_epsilon").get<double>(), 0.0);
}

TEST_F(Cli, TrainIsByteIdenticalAndReusesData) {
  ASSERT_EQ(run_small("gen-data", dir("d")).code, 0);
  const std::string data = "--data " + (dir("d") / "dataset.jsonl").string();
  ASSERT_EQ(run_small("train", dir("a"), data).code, 0);
  ASSERT_EQ(run_small("train", dir("b"), data).code, 0);
  ASSERT_EQ(run_small("train", dir("c")).code, 0);  // regenerates the same dataset
  for (const char* f : {"model.ckpt", "train_log.json", "config.json"}) {
    EXPECT_EQ(slurp(dir("a") / f), slurp(dir("b") / f)) << f;
    EXPECT_EQ(slurp(dir("a") / f), slurp(dir("c") / f)) << f;
  }
  const auto log = json_at(dir("a") / "train_log.json");
  EXPECT_TRUE(log.contains("config_hash"));
}

TEST_F(Cli, DatasetCacheGivesTheSameModel) {
  const std::string env = "GCB_CACHE_DIR=" + dir("cache").string();
  ASSERT_EQ(run("train --config " + kSmall + " --out " + dir("a").string(), env).code, 0);
  ASSERT_EQ(run("train --config " + kSmall + " --out " + dir("b").string(), env).code, 0);
  ASSERT_EQ(run_small("train", dir("c")).code, 0);
  EXPECT_EQ(slurp(dir("a") / "model.ckpt"), slurp(dir("b") / "model.ckpt"));
  EXPECT_EQ(slurp(dir("a") / "model.ckpt"), slurp(dir("c") / "model.ckpt"));
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir("cache"))) files += e.path().extension() == ".jsonl";
  EXPECT_EQ(files, 1);
}

TEST_F(Cli, AblationFlagsLogDistinctConfigs) {
  const std::vector<std::pair<std::string, std::string>> flags = {
      {"", ""},
      {"--no-grounding", "/repr/grounding"},
      {"--l2", "/repr/norm"},
      {"--critic-grads", "/rl/critic_grads"},
      {"--no-reward-decoder", "/repr/reward_decoder"},
      {"--dynamics-model", "/repr/dynamics_model"},
  };
  std::set<std::string> hashes;
  nlohmann::json base;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    const fs::path out = dir("run" + std::to_string(i));
    const Result r = run_small("train", out, flags[i].first);
    ASSERT_EQ(r.code, 0) << flags[i].first << "\n" << r.output;
    const auto cfg = json_at(out / "config.json");
    hashes.insert(cfg.at("config_hash").get<std::string>());
    const auto log = json_at(out / "train_log.json");
    EXPECT_EQ(log.at("config_hash"), cfg.at("config_hash"));
    if (i == 0) {
      base = cfg;
      continue;
    }
    const nlohmann::json::json_pointer ptr(flags[i].second);
    EXPECT_NE(cfg.at(ptr), base.at(ptr)) << flags[i].first;
  }
  EXPECT_EQ(hashes.size(), flags.size());
}

TEST_F(Cli, OracleMetricContractsAndBoundsHold) {
  ASSERT_EQ(run_small("oracle-metric", dir("m"), "--csv").code, 0);
  const auto report = json_at(dir("m") / "oracle_report.json");
  EXPECT_LE(report.at("max_residual_ratio").get<double>(), report.at("contraction").get<double>() + 1e-9);
  EXPECT_TRUE(fs::exists(dir("m") / "metric.csv"));
  const Result b = run_small("verify-bounds", dir("m"), "--metric " + (dir("m") / "metric.bin").string());
  EXPECT_EQ(b.code, 0) << b.output;
  const auto bounds = json_at(dir("m") / "bounds.json");
  EXPECT_TRUE(bounds.contains("config_hash"));
}

TEST_F(Cli, MetricFormFlagsChangeTheConfig) {
  ASSERT_EQ(run_small("oracle-metric", dir("u")).code, 0);
  ASSERT_EQ(run_small("oracle-metric", dir("c"), "--metric-form convex").code, 0);
  EXPECT_NE(json_at(dir("u") / "config.json").at("config_hash"),
            json_at(dir("c") / "config.json").at("config_hash"));
  // the convex form is not the value-bounding one
  EXPECT_EQ(run_small("verify-bounds", dir("c"), "--metric " + (dir("c") / "metric.bin").string()).code, 1);
}

TEST_F(Cli, VerifyBoundsRejectsForeignMetric) {
  ASSERT_EQ(run_small("oracle-metric", dir("m")).code, 0);
  const fs::path cfg = dir("tiny.json");
  std::ofstream(cfg) << R"({"env": {"grid_size": 2}})";
  const Result r = run("verify-bounds --metric " + (dir("m") / "metric.bin").string() + " --config " +
                       cfg.string() + " --out " + dir("o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("states"), std::string::npos);
}

TEST_F(Cli, ProbesAndEvaluation) {
  ASSERT_EQ(run_small("train", dir("t")).code, 0);
  const std::string ckpt = "--checkpoint " + (dir("t") / "model.ckpt").string();
  for (const char* mode : {"phi-nn", "psi-analogy"}) {
    ASSERT_EQ(run_small("probe", dir("p"), ckpt + " --mode " + mode).code, 0);
    const auto j = json_at(dir("p") / (std::string("probe_") + mode + ".json"));
    EXPECT_EQ(j.at("cases"), 40);
  }
  ASSERT_EQ(run_small("probe", dir("p"), ckpt + " --mode embed-dump").code, 0);
  EXPECT_EQ(slurp(dir("p") / "embeddings.csv").rfind("state_index,goal_index,z0", 0), 0u);

  ASSERT_EQ(run_small("eval", dir("e"), "--mode standard --policy oracle").code, 0);
  EXPECT_EQ(json_at(dir("e") / "eval_standard.json").at("success_rate"), 1.0);
  ASSERT_EQ(run_small("eval", dir("e"), ckpt + " --mode standard").code, 0);
  ASSERT_EQ(run_small("eval", dir("e"), ckpt + " --mode analogy").code, 0);
  const auto a = json_at(dir("e") / "eval_analogy.json");
  EXPECT_EQ(a.at("per_seed").size(), 2u);
  EXPECT_EQ(a.at("input"), "psi-phi");
  EXPECT_EQ(run_small("eval", dir("e"), "--mode standard").code, 1);  // learned policy without checkpoint
  EXPECT_EQ(run_small("eval", dir("e"), "--mode analogy --policy uniform").code, 1);
}

}  // namespace
