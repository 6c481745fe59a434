#pragma once

#include <chrono>
#include <condition_variable>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "vlmr3/image.hpp"

namespace vlmr3::http {

struct EndpointConfig {
  std::string url;  // e.g. https://host/v1/chat/completions
  std::string model;
  std::string auth_env = "VLMR3_API_KEY";
  double timeout_seconds = 60.0;
  int max_in_flight = 4;
  int max_attempts = 3;
  std::chrono::milliseconds backoff{500};
  double temperature = 1.0;
  int max_tokens = 1024;
};

struct ChatMessage {
  std::string role;
  std::string text;
  std::vector<std::shared_ptr<const Image>> images;
};

struct StreamDelta {
  std::string text;
  std::optional<double> logprob;
};

struct Completion {
  std::string text;
  std::vector<StreamDelta> pieces;
  std::string finish_reason;
  std::optional<long long> prompt_tokens;
  std::optional<long long> completion_tokens;
};

// Counting semaphore bounding in-flight requests per transport.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit) : available_(limit > 0 ? limit : 1) {}
  void acquire();
  void release();

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  int available_;
};

std::string base64_encode(const std::string& bytes);
std::string png_data_url(const Image& image);

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;
};
ParsedUrl parse_url(const std::string& url);

// OpenAI-style chat-completions transport. Retries transport failures and
// 5xx/429 responses with exponential backoff.
class ChatTransport {
 public:
  explicit ChatTransport(EndpointConfig config);

  nlohmann::json build_request(const std::vector<ChatMessage>& messages, bool stream,
                               std::optional<std::uint64_t> seed) const;

  Completion complete(const std::vector<ChatMessage>& messages,
                      std::optional<std::uint64_t> seed = std::nullopt);

  // on_delta returns false to stop reading the stream early.
  Completion stream(const std::vector<ChatMessage>& messages,
                    const std::function<bool(const StreamDelta&)>& on_delta,
                    std::optional<std::uint64_t> seed = std::nullopt);

  const EndpointConfig& config() const { return config_; }

 private:
  std::optional<std::string> auth_token() const;
  template <class F>
  auto with_retries(F&& attempt) -> decltype(attempt());

  EndpointConfig config_;
  ParsedUrl url_;
  InFlightLimiter limiter_;
};

}  // namespace vlmr3::http
