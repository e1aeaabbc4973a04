#include <gtest/gtest.h>

#include <filesystem>

#include "avemo/config.hpp"

using namespace avemo;
namespace fs = std::filesystem;

namespace {

RunConfig::EnvLookup env_of(std::map<std::string, std::string> vars) {
  return [vars](const std::string& k) -> std::optional<std::string> {
    auto it = vars.find(k);
    if (it == vars.end()) return std::nullopt;
    return it->second;
  };
}

fs::path write_config(const std::string& body) {
  const auto p = fs::temp_directory_path() / "avemo_config_test.json";
  atomic_write(p, body);
  return p;
}

}  // namespace

TEST(RunConfig, FileThenEnvironmentThenFlags) {
  const auto file = write_config(R"({"train": {"max_steps": 10, "batch_size": 4}, "eval": {"seed": 3}})");
  auto rc = RunConfig::resolve(file, {{"train.batch_size", "16"}},
                               env_of({{"AVEMO_TRAIN_MAX_STEPS", "20"}, {"AVEMO_TRAIN_BATCH_SIZE", "8"}}));
  EXPECT_EQ(rc.get<int>("train.max_steps"), 20);   // env beats file
  EXPECT_EQ(rc.get<int>("train.batch_size"), 16);  // flag beats env
  EXPECT_EQ(rc.get<int>("eval.seed"), 3);          // file beats default
  EXPECT_EQ(rc.get<int>("serve.port"), 8080);      // default
}

TEST(RunConfig, UnknownKeysAndBadTypesAreConfigErrors) {
  auto code = [](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kInvariantViolation;
  };
  EXPECT_EQ(code([] { RunConfig::resolve(std::nullopt, {{"train.nope", "1"}}, env_of({})); }), ErrorCode::kConfigError);
  EXPECT_EQ(code([] { RunConfig::resolve(std::nullopt, {{"serve.port", "eighty"}}, env_of({})); }),
            ErrorCode::kConfigError);
  EXPECT_EQ(code([] { RunConfig::resolve(write_config(R"({"serve": {"port": "80"}})"), {}, env_of({})); }),
            ErrorCode::kConfigError);
  EXPECT_EQ(code([] { RunConfig::resolve(write_config("{not json"), {}, env_of({})); }), ErrorCode::kConfigError);
  EXPECT_EQ(code([] { RunConfig::resolve(std::nullopt, {{"train.full_metadata", "maybe"}}, env_of({})); }),
            ErrorCode::kConfigError);
}

TEST(RunConfig, DerivedDefaultsMustBeResolvedBeforeSaving) {
  auto rc = RunConfig::resolve(std::nullopt, {}, env_of({}));
  EXPECT_FALSE(rc.has("train.max_steps"));
  EXPECT_THROW(rc.resolved("train"), Error);
  for (const auto& k : {"train.objectives", "train.max_steps", "train.batch_size", "train.peak_lr", "train.min_lr",
                        "train.warmup_steps"})
    rc.resolve_default(k, 1);
  const auto r = rc.resolved("train");
  for (const auto& [k, v] : r.items()) EXPECT_FALSE(v.is_null()) << k;
  EXPECT_EQ(rc.hash("train").size(), 64u);
}

TEST(RunConfig, HashTracksEveryValue) {
  auto a = RunConfig::resolve(std::nullopt, {}, env_of({}));
  auto b = RunConfig::resolve(std::nullopt, {{"eval.seed", "1"}}, env_of({}));
  EXPECT_EQ(a.hash("serve"), b.hash("serve"));
  EXPECT_NE(a.hash("eval"), b.hash("eval"));
  EXPECT_EQ(RunConfig::env_name("serve.ttl_seconds"), "AVEMO_SERVE_TTL_SECONDS");
}

TEST(RunConfig, RealsAcceptIntegersFromFiles) {
  auto rc = RunConfig::resolve(write_config(R"({"eval": {"top_p": 1}})"), {}, env_of({}));
  EXPECT_DOUBLE_EQ(rc.get<double>("eval.top_p"), 1.0);
}
