#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include <json.hpp>

#include "avemo/tensor.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " AVEMO_CLI_PATH " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, ""};
  std::string out;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), p)) > 0;) out.append(buf.data(), n);
  const int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("avemo_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string d(const std::string& sub) const { return (dir_ / sub).string(); }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, SynthIsDeterministic) {
  const auto a = run("synth --seed 0 --dialogues 2 --out " + d("a"));
  const auto b = run("synth --seed 0 --dialogues 2 --out " + d("b"));
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(slurp(d("a") + "/manifest.jsonl"), slurp(d("b") + "/manifest.jsonl"));
  for (const auto& e : fs::recursive_directory_iterator(d("a"))) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.jsonl") continue;
    const auto other = fs::path(d("b")) / fs::relative(e.path(), d("a"));
    if (e.path().filename().string().starts_with("resolved_")) continue;
    EXPECT_EQ(slurp(e.path()), slurp(other)) << e.path();
  }
  const auto c = run("synth --seed 1 --dialogues 2 --out " + d("c"));
  EXPECT_NE(slurp(d("a") + "/manifest.jsonl"), slurp(d("c") + "/manifest.jsonl"));
}

TEST_F(Cli, ConfigErrorsExitWithTwo) {
  EXPECT_EQ(run("train --stage 5 --manifest x").code, 2);
  EXPECT_EQ(run("synth --out " + d("s"), "AVEMO_SYNTH_DIALOGUES=many").code, 2);
  EXPECT_EQ(run("synth --out " + d("s") + " --set synth.bogus=1").code, 2);
  EXPECT_EQ(run("synth").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, DataErrorsExitWithThree) {
  avemo::atomic_write(dir_ / "bad.jsonl", "{\"not\": \"a record\"}\n");
  EXPECT_EQ(run("preprocess --manifest " + d("bad.jsonl") + " --out " + d("cache")).code, 3);
  const auto r = run("preprocess --manifest " + d("missing.jsonl") + " --out " + d("cache"));
  EXPECT_EQ(r.code, 3) << r.out;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1) << r.out;  // one-line diagnosis
}

TEST_F(Cli, PreprocessTrainEvaluate) {
  ASSERT_EQ(run("synth --dialogues 2 --out " + d("corpus")).code, 0);
  const auto manifest = d("corpus") + "/manifest.jsonl";
  const auto p = run("preprocess --manifest " + manifest + " --out " + d("cache") + " --workers 2");
  ASSERT_EQ(p.code, 0) << p.out;
  EXPECT_NE(p.out.find("\"computed\""), std::string::npos) << p.out;

  const auto t = run("train --stage 3 --manifest " + manifest + " --cache " + d("cache") + " --out " + d("ck") +
                     " --max-steps 2 --batch-size 2 --metrics-log " + d("log.jsonl"));
  ASSERT_EQ(t.code, 0) << t.out;
  EXPECT_NE(t.out.find("without a stage-1/2 checkpoint"), std::string::npos) << t.out;
  EXPECT_TRUE(fs::exists(d("ck") + "/resolved_train.json"));
  const auto log = slurp(d("log.jsonl"));
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 2);

  const auto e = run("eval --checkpoint " + d("ck") + " --manifest " + manifest + " --cache " + d("cache") +
                     " --turns 1 --out " + d("report.json") + " --set eval.max_new=8");
  ASSERT_EQ(e.code, 0) << e.out;
  EXPECT_NE(e.out.find("BLEU-1"), std::string::npos);
  EXPECT_NE(e.out.find("rather than test"), std::string::npos) << e.out;
  const auto rep = nlohmann::json::parse(slurp(d("report.json")));
  EXPECT_EQ(rep["n_samples"], 2);
  EXPECT_TRUE(fs::exists(d("report.table.txt")));
}
