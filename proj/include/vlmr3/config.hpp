#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlmr3/core.hpp"
#include "vlmr3/http_chat.hpp"
#include "vlmr3/toy.hpp"

namespace vlmr3::config {

struct BackendSettings {
  std::string kind = "toy";  // toy | oracle | remote
  http::EndpointConfig endpoint;
  std::string checkpoint;  // toy parameters to load for eval/perturb
};

struct ToySettings {
  toy::TaskConfig task;
  toy::PolicyConfig policy;
  std::size_t train_size = 720;
  std::size_t eval_size = 720;
};

struct TrainSettings {
  int steps = 300;
  int groups_per_step = 16;
  double temperature = 1.0;
  int sft_epochs = 1;
  std::size_t sft_items = 72;
  double sft_learning_rate = 0.5;
  bool skip_sft = false;
  bool skip_rgrpo = false;
  int eval_every = 50;
  std::size_t max_total_tokens = 256;
};

struct PerturbSettings {
  std::string kind = "replace_random";
  double jitter = 0.5;
  std::vector<double> grid{0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
};

struct DataSettings {
  std::string inputs;      // JSON-lines QA manifest
  std::string corpus;      // accepted samples
  std::string images_dir;  // content-addressed image store
  int max_attempts = 4;
  int filter_attempts = 3;
  int filter_backoff_ms = 200;
  http::EndpointConfig generator;
  http::EndpointConfig region_filter;
  http::EndpointConfig reasoning_filter;
};

struct RunConfig {
  std::string output_dir = "runs/default";
  std::uint64_t seed = 0;
  PolicyConfig policy;
  BackendSettings backend;
  ToySettings toy;
  TrainSettings train;
  PerturbSettings perturb;
  DataSettings data;

  // Throws ConfigError.
  void validate() const;
  // SHA-256 of the canonical JSON rendering.
  std::string hash() const;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig from_json(const nlohmann::json& j);

// Replaces ${NAME} with the environment value; unset names are a ConfigError.
std::string interpolate_env(std::string_view text);

// Reads YAML over the defaults. Unknown keys and ill-typed values are
// ConfigErrors; string values are environment-interpolated.
RunConfig load(const std::filesystem::path& path);
RunConfig parse_yaml(const std::string& text);

}  // namespace vlmr3::config
