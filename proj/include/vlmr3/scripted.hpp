#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "vlmr3/backend.hpp"

namespace vlmr3 {

// Replays a fixed transcript one character per token. The script may depend
// on the episode input and seed, which is enough to model stochastic or
// answer-dependent policies in tests.
class ScriptedBackend final : public PolicyBackend {
 public:
  using Script = std::function<std::string(const EpisodeInput&, std::uint64_t seed)>;

  explicit ScriptedBackend(std::string script, int tokens_per_image = 4,
                           bool can_inject_images = true);
  ScriptedBackend(Script script, int tokens_per_image = 4, bool can_inject_images = true);

  std::string name() const override { return "scripted"; }
  Capabilities capabilities() const override { return {false, can_inject_, true}; }
  std::unique_ptr<Session> start(const EpisodeInput& input, const SamplingConfig& sampling) override;

  // Every system prompt and injected region seen so far, for assertions.
  std::vector<std::string> system_prompts() const;
  std::vector<RegionEvidence> injected() const;

 private:
  friend class ScriptedSession;
  Script script_;
  int tokens_per_image_;
  bool can_inject_;
  mutable std::mutex mutex_;
  std::vector<std::string> system_prompts_;
  std::vector<RegionEvidence> injected_;
};

}  // namespace vlmr3
