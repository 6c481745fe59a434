#include "vlmr3/scripted.hpp"

namespace vlmr3 {

class ScriptedSession final : public Session {
 public:
  ScriptedSession(ScriptedBackend& owner, std::string script)
      : owner_(owner), script_(std::move(script)) {}

  Generation generate_until(const StopPredicate& stop, std::size_t max_tokens) override {
    Generation g;
    while (pos_ < script_.size()) {
      if (g.token_ids.size() >= max_tokens) {
        g.reason = StopReason::TokenBudget;
        return g;
      }
      const char c = script_[pos_++];
      g.text.push_back(c);
      g.token_ids.push_back(static_cast<unsigned char>(c));
      g.logprobs.push_back(0.0);
      if (stop && stop(g.text)) {
        g.reason = StopReason::Predicate;
        return g;
      }
    }
    g.reason = StopReason::EndOfSequence;
    return g;
  }

  int inject_image(const RegionEvidence& evidence) override {
    if (!owner_.can_inject_) throw Error(ErrorCode::Unsupported, "scripted backend configured text-only");
    std::lock_guard lock(owner_.mutex_);
    owner_.injected_.push_back(evidence);
    return owner_.tokens_per_image_;
  }

 private:
  ScriptedBackend& owner_;
  std::string script_;
  std::size_t pos_ = 0;
};

ScriptedBackend::ScriptedBackend(std::string script, int tokens_per_image, bool can_inject_images)
    : ScriptedBackend(Script([s = std::move(script)](const EpisodeInput&, std::uint64_t) { return s; }),
                      tokens_per_image, can_inject_images) {}

ScriptedBackend::ScriptedBackend(Script script, int tokens_per_image, bool can_inject_images)
    : script_(std::move(script)), tokens_per_image_(tokens_per_image), can_inject_(can_inject_images) {}

std::unique_ptr<Session> ScriptedBackend::start(const EpisodeInput& input, const SamplingConfig& sampling) {
  {
    std::lock_guard lock(mutex_);
    system_prompts_.push_back(input.system_prompt);
  }
  std::string text = sampling.forced_text ? *sampling.forced_text : script_(input, sampling.seed);
  return std::make_unique<ScriptedSession>(*this, std::move(text));
}

std::vector<std::string> ScriptedBackend::system_prompts() const {
  std::lock_guard lock(mutex_);
  return system_prompts_;
}

std::vector<RegionEvidence> ScriptedBackend::injected() const {
  std::lock_guard lock(mutex_);
  return injected_;
}

}  // namespace vlmr3
