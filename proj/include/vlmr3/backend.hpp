#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmr3/core.hpp"
#include "vlmr3/vision.hpp"

namespace vlmr3 {

struct EpisodeInput {
  std::string question_id;
  vision::WorkingImage image;
  std::string question;
  std::string system_prompt;
};

struct SamplingConfig {
  std::uint64_t seed = 0;
  double temperature = 1.0;
  bool greedy = false;
  // Teacher forcing: emit exactly this text and report the policy's logprobs.
  std::optional<std::string> forced_text;
};

// Called with the text generated so far in the current call.
using StopPredicate = std::function<bool(std::string_view)>;

enum class StopReason { Predicate, TokenBudget, EndOfSequence };

struct Generation {
  std::string text;
  std::vector<std::int32_t> token_ids;
  std::vector<double> logprobs;  // aligned with token_ids; NaN if unreported
  StopReason reason = StopReason::EndOfSequence;
};

struct Capabilities {
  bool can_train = false;
  bool can_inject_images = false;
  bool concurrent_safe = false;
};

// One episode's context on the policy side.
class Session {
 public:
  virtual ~Session() = default;
  virtual Generation generate_until(const StopPredicate& stop, std::size_t max_tokens) = 0;
  // Returns the number of context positions the region occupies.
  virtual int inject_image(const RegionEvidence& evidence) = 0;
};

class PolicyBackend {
 public:
  virtual ~PolicyBackend() = default;
  virtual std::string name() const = 0;
  virtual Capabilities capabilities() const = 0;
  virtual std::unique_ptr<Session> start(const EpisodeInput& input,
                                         const SamplingConfig& sampling) = 0;
};

struct ScoreOptions {
  // Added to the observed token's logit at every injected position. Only
  // used to probe that injected positions carry no gradient.
  double injected_logit_shift = 0.0;
};

struct SequenceLogprobs {
  std::vector<double> current;
  std::vector<double> reference;
};

class TrainableBackend : public PolicyBackend {
 public:
  virtual std::size_t parameter_count() const = 0;
  virtual std::vector<double> parameters() const = 0;
  virtual void set_parameters(std::span<const double> values) = 0;
  virtual std::uint64_t version() const = 0;

  // Per-token logprobs for the whole sequence, injected positions included,
  // under the current parameters and the reference snapshot.
  virtual SequenceLogprobs score_sequence(const EpisodeInput& input, const Trajectory& trajectory,
                                          const ScoreOptions& options = {}) const = 0;

  // grad += sum_t weights[t] * d logp_t / d theta
  virtual void accumulate_gradient(const EpisodeInput& input, const Trajectory& trajectory,
                                   std::span<const double> token_weights,
                                   std::span<double> grad) const = 0;

  // One descent step on `grad` (the loss gradient). Returns the new version id.
  virtual std::uint64_t apply_update(std::span<const double> grad) = 0;

  // Freezes the current parameters as the reference policy.
  virtual void snapshot_reference() = 0;
};

}  // namespace vlmr3
