#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlmr3/backend.hpp"
#include "vlmr3/rewards.hpp"
#include "vlmr3/rgrpo.hpp"

namespace vlmr3::rollout {

enum class PerturbKind { ReplaceRandom, Jitter };

std::string_view to_string(PerturbKind kind);
PerturbKind parse_perturb_kind(std::string_view text);

struct PerturbSpec {
  double grounding_accuracy = 1.0;  // probability a box is left alone
  PerturbKind kind = PerturbKind::ReplaceRandom;
  double jitter = 0.5;  // fraction of box size for shift and scale noise
  std::uint64_t seed = 0;

  void validate() const;
};

// Applies PerturbSpec to one box at a time from a seeded stream.
class GroundingPerturber {
 public:
  GroundingPerturber(PerturbSpec spec, std::uint64_t stream);
  // Returns the box to execute; `changed` reports whether it was altered.
  BBox apply(const BBox& box, ImageDims dims, bool& changed);

 private:
  PerturbSpec spec_;
  std::mt19937_64 rng_;
};

std::vector<CropAction> perturb_grounding(std::span<const CropAction> actions,
                                          const PerturbSpec& spec, ImageDims dims);

struct EpisodeConfig {
  InjectionMode injection_mode = InjectionMode::Interleaved;
  int max_crop_turns = 8;
  std::size_t max_total_tokens = 4096;
  double iou_threshold = 0.9;
  std::optional<PerturbSpec> perturb;

  void validate() const;
};

// Drives generate -> intercept -> crop/zoom -> inject until the answer closes
// or a budget runs out.
Trajectory run_episode(PolicyBackend& backend, const EpisodeInput& input,
                       const EpisodeConfig& config, const SamplingConfig& sampling);

struct GroupConfig {
  int group_size = 5;
  EpisodeConfig episode;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  bool parallel = false;
  rewards::JudgeConfig judge;
};

// M scored episodes for one question with advantages attached. Returns
// nullopt when fewer than two episodes completed.
std::optional<GroupBatch> run_group(PolicyBackend& backend,
                                    std::shared_ptr<const EpisodeInput> input,
                                    const std::string& ground_truth, const GroupConfig& config,
                                    std::size_t* failed_episodes = nullptr);

// One R-GRPO update over the groups. Throws NonFiniteGradient without
// touching parameters if the loss is not finite.
rgrpo::StepMetrics train_step(TrainableBackend& backend, std::span<const GroupBatch> groups,
                              double beta);

// Loss and cotangents only; used by train_step and by gradient checks.
struct BatchLoss {
  rgrpo::LossResult loss;
  std::vector<std::vector<rgrpo::TokenMask>> masks;
  std::vector<std::vector<SequenceLogprobs>> logprobs;
};
BatchLoss compute_batch_loss(const TrainableBackend& backend, std::span<const GroupBatch> groups,
                             double beta, const ScoreOptions& options = {});

struct EvalItem {
  std::shared_ptr<const EpisodeInput> input;
  std::string ground_truth;
};

struct EvalReport {
  std::size_t samples = 0;
  std::size_t failures = 0;
  double accuracy = 0.0;
  double mean_crops = 0.0;
  double format_rate = 0.0;
  double mean_think_length = 0.0;
};

nlohmann::json to_json(const EvalReport& report);

// Greedy episode per item.
EvalReport evaluate(PolicyBackend& backend, std::span<const EvalItem> dataset,
                    const EpisodeConfig& config, std::uint64_t seed = 0,
                    rewards::JudgeConfig judge = {});

struct SweepPoint {
  double grounding_accuracy = 0.0;
  EvalReport report;
};

std::vector<SweepPoint> perturbation_sweep(PolicyBackend& backend,
                                           std::span<const EvalItem> dataset,
                                           const EpisodeConfig& config,
                                           std::span<const double> accuracies,
                                           PerturbKind kind, double jitter, std::uint64_t seed);

// Supervised warm start: teacher-forces each transcript and descends the
// mean action-token NLL. Returns the loss per step.
struct SftItem {
  std::shared_ptr<const EpisodeInput> input;
  std::string transcript;
};
std::vector<double> run_sft(TrainableBackend& backend, std::span<const SftItem> items,
                            int epochs, const EpisodeConfig& config);

struct TrainConfig {
  int steps = 300;
  int groups_per_step = 16;
  double beta = 0.0;
  GroupConfig group;
  int eval_every = 0;
};

struct TrainResult {
  std::vector<rgrpo::StepMetrics> metrics;
  std::vector<std::pair<int, EvalReport>> evals;
};

using QuestionSampler =
    std::function<std::pair<std::shared_ptr<const EpisodeInput>, std::string>(std::uint64_t)>;
using StepCallback = std::function<void(const rgrpo::StepMetrics&)>;

TrainResult run_rgrpo(TrainableBackend& backend, const QuestionSampler& sampler,
                      const TrainConfig& config, std::span<const EvalItem> eval_set = {},
                      const StepCallback& on_step = {});

// Line-delimited transcript records.
nlohmann::json to_json(const Trajectory& trajectory);
nlohmann::json to_json(const GroupBatch& group);

}  // namespace vlmr3::rollout
