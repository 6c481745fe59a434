#include "vlmr3/http_chat.hpp"

#include <openssl/evp.h>

#include <cstdlib>
#include <thread>

#include "httplib.h"

#include "vlmr3/error.hpp"

namespace vlmr3::http {

void InFlightLimiter::acquire() {
  std::unique_lock lock(mutex_);
  cv_.wait(lock, [&] { return available_ > 0; });
  --available_;
}

void InFlightLimiter::release() {
  {
    std::lock_guard lock(mutex_);
    ++available_;
  }
  cv_.notify_one();
}

namespace {

struct LimiterGuard {
  explicit LimiterGuard(InFlightLimiter& l) : limiter(l) { limiter.acquire(); }
  ~LimiterGuard() { limiter.release(); }
  InFlightLimiter& limiter;
};

// Failure worth retrying: transport error, throttling or a server error.
struct TransientFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace

std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string png_data_url(const Image& image) { return "data:image/png;base64," + base64_encode(encode_png(image)); }

ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorCode::ConfigError, "endpoint url needs a scheme: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  ParsedUrl out;
  out.scheme_host_port = url.substr(0, path_begin);
  out.path = path_begin == std::string::npos ? "/" : url.substr(path_begin);
  return out;
}

ChatTransport::ChatTransport(EndpointConfig config)
    : config_(std::move(config)), url_(parse_url(config_.url)), limiter_(config_.max_in_flight) {}

std::optional<std::string> ChatTransport::auth_token() const {
  if (config_.auth_env.empty()) return std::nullopt;
  if (const char* v = std::getenv(config_.auth_env.c_str()); v && *v) return std::string(v);
  return std::nullopt;
}

nlohmann::json ChatTransport::build_request(const std::vector<ChatMessage>& messages, bool stream,
                                            std::optional<std::uint64_t> seed) const {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : messages) {
    if (m.images.empty()) {
      msgs.push_back({{"role", m.role}, {"content", m.text}});
      continue;
    }
    nlohmann::json content = nlohmann::json::array();
    for (const auto& img : m.images)
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", png_data_url(*img)}}}});
    if (!m.text.empty()) content.push_back({{"type", "text"}, {"text", m.text}});
    msgs.push_back({{"role", m.role}, {"content", content}});
  }
  nlohmann::json req = {{"model", config_.model},
                        {"messages", msgs},
                        {"stream", stream},
                        {"temperature", config_.temperature},
                        {"max_tokens", config_.max_tokens},
                        {"logprobs", true}};
  if (seed) req["seed"] = *seed;
  // Resume a partial assistant turn (vLLM-style chat template flags).
  if (!messages.empty() && messages.back().role == "assistant") {
    req["continue_final_message"] = true;
    req["add_generation_prompt"] = false;
  }
  return req;
}

template <class F>
auto ChatTransport::with_retries(F&& attempt) -> decltype(attempt()) {
  const int attempts = std::max(1, config_.max_attempts);
  std::string last_error;
  for (int i = 0; i < attempts; ++i) {
    if (i > 0) std::this_thread::sleep_for(config_.backoff * (1 << (i - 1)));
    try {
      LimiterGuard guard(limiter_);
      return attempt();
    } catch (const TransientFailure& e) {
      last_error = e.what();
    }
  }
  throw Error(ErrorCode::BackendFailure,
              "request to " + config_.url + " failed after " + std::to_string(attempts) + " attempts: " + last_error);
}

namespace {

httplib::Headers make_headers(const std::optional<std::string>& token) {
  httplib::Headers h{{"Accept", "application/json, text/event-stream"}};
  if (token) h.emplace("Authorization", "Bearer " + *token);
  return h;
}

void configure(httplib::Client& cli, double timeout_seconds) {
  const auto secs = static_cast<time_t>(timeout_seconds);
  const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
}

void check_status(int status, const std::string& body) {
  if (status == 429 || status >= 500) throw TransientFailure("HTTP " + std::to_string(status));
  if (status < 200 || status >= 300)
    throw Error(ErrorCode::BackendFailure, "HTTP " + std::to_string(status) + ": " + body.substr(0, 512));
}

void read_usage(const nlohmann::json& j, Completion& out) {
  if (auto it = j.find("usage"); it != j.end() && it->is_object()) {
    if (it->contains("prompt_tokens")) out.prompt_tokens = it->at("prompt_tokens").get<long long>();
    if (it->contains("completion_tokens")) out.completion_tokens = it->at("completion_tokens").get<long long>();
  }
}

std::optional<double> summed_logprob(const nlohmann::json& choice) {
  const auto lp = choice.find("logprobs");
  if (lp == choice.end() || !lp->is_object()) return std::nullopt;
  const auto content = lp->find("content");
  if (content == lp->end() || !content->is_array() || content->empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& t : *content) sum += t.value("logprob", 0.0);
  return sum;
}

}  // namespace

Completion ChatTransport::complete(const std::vector<ChatMessage>& messages, std::optional<std::uint64_t> seed) {
  const std::string body = build_request(messages, false, seed).dump();
  return with_retries([&]() -> Completion {
    httplib::Client cli(url_.scheme_host_port);
    configure(cli, config_.timeout_seconds);
    auto res = cli.Post(url_.path, make_headers(auth_token()), body, "application/json");
    if (!res) throw TransientFailure(httplib::to_string(res.error()));
    check_status(res->status, res->body);
    try {
      const auto j = nlohmann::json::parse(res->body);
      const auto& choice = j.at("choices").at(0);
      Completion out;
      const auto& content = choice.at("message").at("content");
      out.text = content.is_string() ? content.get<std::string>() : std::string();
      out.pieces.push_back({out.text, summed_logprob(choice)});
      out.finish_reason = choice.value("finish_reason", std::string());
      read_usage(j, out);
      return out;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BackendFailure, std::string("malformed completion: ") + e.what());
    }
  });
}

Completion ChatTransport::stream(const std::vector<ChatMessage>& messages,
                                 const std::function<bool(const StreamDelta&)>& on_delta,
                                 std::optional<std::uint64_t> seed) {
  const std::string body = build_request(messages, true, seed).dump();
  return with_retries([&]() -> Completion {
    Completion out;
    std::string buffer;
    bool stopped = false;
    bool delivered = false;
    std::string parse_error;

    const auto handle_event = [&](std::string_view data) {
      if (data == "[DONE]") return false;
      try {
        const auto j = nlohmann::json::parse(data);
        read_usage(j, out);
        const auto choices = j.find("choices");
        if (choices == j.end() || !choices->is_array() || choices->empty()) return true;
        const auto& choice = choices->at(0);
        if (auto fr = choice.find("finish_reason"); fr != choice.end() && fr->is_string())
          out.finish_reason = fr->get<std::string>();
        const auto delta = choice.find("delta");
        if (delta == choice.end()) return true;
        const auto content = delta->find("content");
        if (content == delta->end() || !content->is_string()) return true;
        StreamDelta d{content->get<std::string>(), summed_logprob(choice)};
        if (d.text.empty()) return true;
        out.text += d.text;
        out.pieces.push_back(d);
        delivered = true;
        if (!on_delta(d)) {
          stopped = true;
          return false;
        }
      } catch (const nlohmann::json::exception& e) {
        parse_error = e.what();
        return false;
      }
      return true;
    };

    httplib::Client cli(url_.scheme_host_port);
    configure(cli, config_.timeout_seconds);
    httplib::Request req;
    req.method = "POST";
    req.path = url_.path;
    req.headers = make_headers(auth_token());
    req.set_header("Content-Type", "application/json");
    req.body = body;
    int status = 0;
    std::string error_body;
    req.response_handler = [&](const httplib::Response& r) {
      status = r.status;
      return true;
    };
    req.content_receiver = [&](const char* data, std::size_t len, std::uint64_t, std::uint64_t) {
      if (status != 0 && (status < 200 || status >= 300)) {
        error_body.append(data, len);
        return true;
      }
      buffer.append(data, len);
      std::size_t nl;
      while ((nl = buffer.find('\n')) != std::string::npos) {
        std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("data:", 0) != 0) continue;
        std::string_view data(line);
        data.remove_prefix(5);
        while (!data.empty() && data.front() == ' ') data.remove_prefix(1);
        if (!handle_event(data)) return false;
      }
      return true;
    };

    auto res = cli.send(req);
    if (!parse_error.empty()) throw Error(ErrorCode::BackendFailure, "malformed stream event: " + parse_error);
    if (stopped || (!res && res.error() == httplib::Error::Canceled)) return out;
    if (!res) {
      if (delivered) throw Error(ErrorCode::BackendFailure, "stream interrupted: " + httplib::to_string(res.error()));
      throw TransientFailure(httplib::to_string(res.error()));
    }
    check_status(res->status, error_body);
    return out;
  });
}

}  // namespace vlmr3::http
