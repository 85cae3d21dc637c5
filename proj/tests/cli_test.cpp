#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "support.hpp"

namespace fs = std::filesystem;
namespace test = nmg::test;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const test::TempDir& dir, const std::string& args) {
  const fs::path log = dir / "cli.log";
  const std::string cmd = std::string(NMG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const test::TempDir& dir, const nmg::RunConfig& c) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << c.to_json().dump(2);
  return p;
}

}  // namespace

TEST(Cli, UsageErrors) {
  test::TempDir dir("cli_usage");
  EXPECT_EQ(run_cli(dir, "--help").code, 0);
  EXPECT_EQ(run_cli(dir, "").code, 1);
  EXPECT_EQ(run_cli(dir, "frobnicate").code, 1);
  EXPECT_EQ(run_cli(dir, "gen-corpus").code, 1);
  auto missing = run_cli(dir, "meta-train --data " + (dir / "nothing").string() + " --run-dir " + (dir / "r").string());
  EXPECT_EQ(missing.code, 2) << missing.out;
  std::ofstream(dir / "bad.json") << R"({"rl": {"typo": 1}})";
  auto bad = run_cli(dir, "--config " + (dir / "bad.json").string() + " gen-corpus --out " + (dir / "x").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("rl.typo"), std::string::npos) << bad.out;
}

TEST(Cli, GenCorpusIsByteIdentical) {
  test::TempDir dir("cli_gen");
  const auto cfg = write_config(dir, test::tiny_run_config(4)).string();
  ASSERT_EQ(run_cli(dir, "--config " + cfg + " gen-corpus --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run_cli(dir, "--config " + cfg + " gen-corpus --out " + (dir / "b").string()).code, 0);
  ASSERT_EQ(run_cli(dir, "--config " + cfg + " --seed 5 gen-corpus --out " + (dir / "c").string()).code, 0);
  for (const char* f : {"train.jsonl", "test.jsonl"}) {
    EXPECT_FALSE(slurp(dir / "a" / f).empty());
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f));
    EXPECT_NE(slurp(dir / "a" / f), slurp(dir / "c" / f));
  }
}

TEST(Cli, EndToEnd) {
  test::TempDir dir("cli_e2e");
  const auto cfg = write_config(dir, test::tiny_run_config(6)).string();
  const std::string data = (dir / "data").string(), run = (dir / "run").string();
  const std::string global = "--config " + cfg + " --run-dir " + run + " ";
  ASSERT_EQ(run_cli(dir, "--config " + cfg + " gen-corpus --out " + data).code, 0);

  auto early = run_cli(dir, "--config " + cfg + " --run-dir " + run + " meta-test --data " + data);
  EXPECT_EQ(early.code, 2) << early.out;

  auto stopped = run_cli(dir, global + "meta-train --data " + data + " --stop-after 2");
  ASSERT_EQ(stopped.code, 0) << stopped.out;
  EXPECT_NE(stopped.out.find("stopped after 2"), std::string::npos) << stopped.out;
  auto done = run_cli(dir, global + "meta-train --quiet --data " + data);
  ASSERT_EQ(done.code, 0) << done.out;
  EXPECT_NE(done.out.find("finished after 4"), std::string::npos) << done.out;

  auto tested = run_cli(dir, "--run-dir " + run + " meta-test --data " + data);
  ASSERT_EQ(tested.code, 0) << tested.out;
  const auto report = json::parse(slurp(fs::path(run) / "meta_test.json"));
  ASSERT_EQ(report["rows"].size(), 2u);
  EXPECT_EQ(report["rows"][0]["strategy"], "neural");
  EXPECT_EQ(report["rows"][1]["strategy"], "random");

  auto base = run_cli(dir, "--run-dir " + run + " baseline --data " + data + " --strategy span --strategy none");
  ASSERT_EQ(base.code, 0) << base.out;
  const auto rows = json::parse(slurp(fs::path(run) / "baseline.json"))["rows"];
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0]["strategy"], "span");
  EXPECT_EQ(run_cli(dir, "--run-dir " + run + " baseline --data " + data + " --strategy neural").code, 1);

  auto analyzed = run_cli(dir, "--run-dir " + run + " analyze");
  ASSERT_EQ(analyzed.code, 0) << analyzed.out;
  const auto analysis = json::parse(slurp(fs::path(run) / "analysis.json"));
  EXPECT_EQ(analysis["episodes"], 4);
  EXPECT_TRUE(analysis["agents"].contains("neural"));
  EXPECT_TRUE(analysis.contains("neural_minus_random"));
  EXPECT_GE(analysis["masked_accuracy"]["random"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(fs::path(run) / "regret.csv"));
}
