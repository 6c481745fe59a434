#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlmr3/core.hpp"

namespace vlmr3::rgrpo {

// true = action token (model text, crop command); false = injected image token.
struct TokenMask {
  std::vector<bool> bits;

  std::size_t size() const { return bits.size(); }
  std::size_t count() const;
  bool operator[](std::size_t i) const { return bits[i]; }
};

// Group-relative advantages with the population standard deviation. A group
// whose rewards are all equal yields all zeros.
std::vector<double> normalize_advantages(std::span<const double> rewards);

TokenMask action_mask(const Trajectory& trajectory);

// Sum of logprobs over mask-true positions.
double masked_sum(std::span<const double> logprobs, const TokenMask& mask);

// x - log x - 1 with x = exp(logp_ref - logp_theta).
double kl_estimate(double logp_theta, double logp_ref);

struct ScoredGroup {
  std::vector<double> advantages;
  std::vector<double> logp_theta;  // summed action-token logprobs per trajectory
  // Value the ratio is divided by; treated as a constant. Defaults to logp_theta.
  std::optional<std::vector<double>> logp_detached;
  std::optional<std::vector<double>> logp_ref;
};

struct LossResult {
  double value = 0.0;
  // d value / d logp_theta[g][i]; chain this through the per-token logprobs.
  std::vector<std::vector<double>> dlogp;
  double kl_mean = 0.0;
};

// Sequence-level surrogate averaged over groups:
//   -(1/M) sum_i [ exp(lp_i - sg(lp_i)) * A_i - beta * KL_i ]
LossResult rgrpo_loss(std::span<const ScoredGroup> groups, double beta);
LossResult rgrpo_loss(const ScoredGroup& group, double beta);

// Mean negative log-likelihood over action tokens.
double sft_loss(std::span<const double> logprobs, const TokenMask& mask);

struct StepMetrics {
  std::int64_t step = 0;
  double mean_reward = 0.0;
  double mean_accuracy = 0.0;
  double mean_format = 0.0;
  double mean_validity = 0.0;
  double mean_length = 0.0;
  double advantage_std = 0.0;
  double loss = 0.0;
  double kl_mean = 0.0;
  double valid_crop_rate = 0.0;
  std::size_t groups = 0;
  std::size_t trajectories = 0;
  std::uint64_t parameter_version = 0;
  std::string label;
};

nlohmann::json to_json(const StepMetrics& metrics);

}  // namespace vlmr3::rgrpo
