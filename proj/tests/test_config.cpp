#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include "vlmr3/config.hpp"

using namespace vlmr3;
using namespace vlmr3::config;

namespace {

std::optional<ErrorCode> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.policy.group_size, 5);
  EXPECT_EQ(c.train.groups_per_step, 16);
  EXPECT_EQ(c.hash().size(), 64u);
  EXPECT_EQ(from_json(to_json(c)).hash(), c.hash());
}

TEST(Config, YamlOverlay) {
  const auto c = parse_yaml(R"(
output_dir: runs/x
seed: 7
policy:
  group_size: 6
  beta: 0.04
  injection_mode: text_only
train:
  steps: 12
  skip_sft: true
perturb:
  grid: [0.5, 0.9]
backend:
  endpoint:
    url: http://localhost:8000/v1/chat/completions
    model: qwen
)");
  EXPECT_EQ(c.output_dir, "runs/x");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.policy.group_size, 6);
  EXPECT_DOUBLE_EQ(c.policy.beta, 0.04);
  EXPECT_EQ(c.policy.injection_mode, InjectionMode::TextOnly);
  EXPECT_EQ(c.train.steps, 12);
  EXPECT_TRUE(c.train.skip_sft);
  EXPECT_EQ(c.train.groups_per_step, 16);
  EXPECT_EQ(c.perturb.grid, (std::vector<double>{0.5, 0.9}));
  EXPECT_EQ(c.backend.endpoint.model, "qwen");
}

TEST(Config, EnvInterpolation) {
  ::setenv("VLMR3_CFG_TEST_HOST", "gpu-7", 1);
  EXPECT_EQ(interpolate_env("http://${VLMR3_CFG_TEST_HOST}:80/x"), "http://gpu-7:80/x");
  const auto c = parse_yaml("backend:\n  endpoint:\n    url: http://${VLMR3_CFG_TEST_HOST}/v1\n");
  EXPECT_EQ(c.backend.endpoint.url, "http://gpu-7/v1");
  ::unsetenv("VLMR3_CFG_TEST_HOST");
  EXPECT_EQ(code_of([] { interpolate_env("${VLMR3_CFG_TEST_HOST}"); }), ErrorCode::ConfigError);
  EXPECT_EQ(interpolate_env("no variables"), "no variables");
}

TEST(Config, Rejections) {
  EXPECT_EQ(code_of([] { parse_yaml("polcy:\n  group_size: 3\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { parse_yaml("policy:\n  grop_size: 3\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { parse_yaml("policy:\n  group_size: many\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { parse_yaml("policy:\n  group_size: 1\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { parse_yaml("policy: [1, 2\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { parse_yaml("perturb:\n  grid: [0.5, 1.5]\n"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { load("/nonexistent/config.yaml"); }), ErrorCode::ConfigError);
}

TEST(Config, HashTracksContent) {
  const auto a = parse_yaml("seed: 1\n"), b = parse_yaml("seed: 1\n"), c = parse_yaml("seed: 2\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(parse_yaml("").hash(), RunConfig{}.hash());
}

TEST(Config, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "vlmr3_config_test.yaml";
  std::ofstream(path) << "train:\n  steps: 3\n";
  EXPECT_EQ(load(path).train.steps, 3);
  std::filesystem::remove(path);
}
