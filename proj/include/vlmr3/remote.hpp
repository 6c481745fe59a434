#pragma once

#include <memory>

#include "vlmr3/backend.hpp"
#include "vlmr3/http_chat.hpp"

namespace vlmr3 {

// Inference-only policy served by a chat-completions endpoint. Each
// generate_until call streams one assistant turn and cuts it at the stop
// predicate; injected regions go back as user turns carrying the image.
class RemoteBackend final : public PolicyBackend {
 public:
  explicit RemoteBackend(http::EndpointConfig config);

  std::string name() const override { return "remote:" + transport_->config().model; }
  Capabilities capabilities() const override { return {false, true, true}; }
  std::unique_ptr<Session> start(const EpisodeInput& input, const SamplingConfig& sampling) override;

  // Not trainable: always throws Unsupported.
  std::uint64_t apply_update(std::span<const double> grad);

  // Context positions a region occupies: one per 28 x 28 pixel patch.
  static int estimate_image_tokens(int width, int height);

 private:
  std::shared_ptr<http::ChatTransport> transport_;
};

}  // namespace vlmr3
