#include "vlmr3/remote.hpp"

#include <cmath>
#include <limits>

namespace vlmr3 {
namespace {

class RemoteSession final : public Session {
 public:
  RemoteSession(std::shared_ptr<http::ChatTransport> transport, const EpisodeInput& input,
                const SamplingConfig& sampling)
      : transport_(std::move(transport)), seed_(sampling.seed) {
    if (!input.system_prompt.empty()) messages_.push_back({"system", input.system_prompt, {}});
    messages_.push_back({"user", input.question, {input.image.image}});
  }

  Generation generate_until(const StopPredicate& stop, std::size_t max_tokens) override {
    auto messages = messages_;
    if (!pending_.empty()) messages.push_back({"assistant", pending_, {}});

    Generation g;
    g.reason = StopReason::EndOfSequence;
    const auto on_delta = [&](const http::StreamDelta& d) {
      if (g.token_ids.size() >= max_tokens) {
        g.reason = StopReason::TokenBudget;
        return false;
      }
      // Cut inside the delta at the first character where the predicate fires.
      std::string accepted;
      bool fired = false;
      for (char c : d.text) {
        accepted.push_back(c);
        g.text.push_back(c);
        if (stop && stop(g.text)) {
          fired = true;
          break;
        }
      }
      g.token_ids.push_back(0);
      g.logprobs.push_back(d.logprob ? *d.logprob : std::numeric_limits<double>::quiet_NaN());
      if (fired) {
        g.reason = StopReason::Predicate;
        return false;
      }
      return true;
    };
    transport_->stream(messages, on_delta, seed_);
    pending_ += g.text;
    return g;
  }

  int inject_image(const RegionEvidence& evidence) override {
    messages_.push_back({"assistant", pending_, {}});
    pending_.clear();
    messages_.push_back({"user", "", {evidence.pixels}});
    return RemoteBackend::estimate_image_tokens(evidence.width, evidence.height);
  }

 private:
  std::shared_ptr<http::ChatTransport> transport_;
  std::uint64_t seed_;
  std::vector<http::ChatMessage> messages_;
  std::string pending_;
};

}  // namespace

RemoteBackend::RemoteBackend(http::EndpointConfig config)
    : transport_(std::make_shared<http::ChatTransport>(std::move(config))) {}

std::unique_ptr<Session> RemoteBackend::start(const EpisodeInput& input, const SamplingConfig& sampling) {
  return std::make_unique<RemoteSession>(transport_, input, sampling);
}

std::uint64_t RemoteBackend::apply_update(std::span<const double>) {
  throw Error(ErrorCode::Unsupported, "remote backends are inference-only");
}

int RemoteBackend::estimate_image_tokens(int width, int height) {
  constexpr int kPatch = 28;
  return std::max(1, ((width + kPatch - 1) / kPatch) * ((height + kPatch - 1) / kPatch));
}

}  // namespace vlmr3
