#include <gtest/gtest.h>

#include <cstdlib>
#include <deque>
#include <mutex>
#include <thread>

#include <png.h>

#include "httplib.h"

#include "support.hpp"
#include "vlmr3/remote.hpp"
#include "vlmr3/rollout.hpp"
#include "vlmr3/vlir.hpp"

using namespace vlmr3;
using nlohmann::json;

namespace {

struct Reply {
  int status = 200;
  std::vector<std::string> pieces;  // streamed as separate events, or joined for plain completions
};

// Chat-completions stand-in on a loopback port.
class MockServer {
 public:
  MockServer() {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      Reply reply;
      {
        std::lock_guard lock(mutex_);
        requests.push_back(json::parse(req.body));
        auth.push_back(req.get_header_value("Authorization"));
        if (!replies.empty()) {
          reply = replies.front();
          replies.pop_front();
        }
      }
      res.status = reply.status;
      if (reply.status != 200) {
        res.set_content("{\"error\": \"scripted\"}", "application/json");
        return;
      }
      if (!requests.back().value("stream", false)) {
        std::string text;
        for (const auto& p : reply.pieces) text += p;
        const json body = {{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}},
                                         {"finish_reason", "stop"},
                                         {"logprobs", {{"content", {{{"logprob", -0.25}}, {{"logprob", -0.5}}}}}}}}},
                           {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 2}}}};
        res.set_content(body.dump(), "application/json");
        return;
      }
      auto pieces = std::make_shared<std::vector<std::string>>(reply.pieces);
      res.set_chunked_content_provider("text/event-stream", [pieces](std::size_t, httplib::DataSink& sink) {
        for (const auto& p : *pieces) {
          const json ev = {{"choices", {{{"delta", {{"content", p}}},
                                         {"logprobs", {{"content", {{{"logprob", -0.1}}}}}}}}}};
          const std::string line = "data: " + ev.dump() + "\n\n";
          if (!sink.write(line.data(), line.size())) return false;
        }
        const std::string done = "data: [DONE]\n\n";
        sink.write(done.data(), done.size());
        sink.done();
        return true;
      });
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  http::EndpointConfig endpoint() const {
    http::EndpointConfig c;
    c.url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
    c.model = "mock-vlm";
    c.auth_env = "VLMR3_TEST_HTTP_KEY";
    c.backoff = std::chrono::milliseconds(1);
    c.timeout_seconds = 5;
    return c;
  }

  std::deque<Reply> replies;
  std::vector<json> requests;
  std::vector<std::string> auth;

 private:
  httplib::Server server_;
  std::thread thread_;
  std::mutex mutex_;
  int port_ = 0;
};

std::vector<http::ChatMessage> hello() { return {{"user", "hello", {}}}; }

}  // namespace

TEST(Transport, PlainCompletion) {
  MockServer server;
  server.replies.push_back({200, {"Yes", "."}});
  ::setenv("VLMR3_TEST_HTTP_KEY", "sk-test", 1);
  http::ChatTransport t(server.endpoint());
  const auto c = t.complete(hello(), 42);
  ::unsetenv("VLMR3_TEST_HTTP_KEY");
  EXPECT_EQ(c.text, "Yes.");
  EXPECT_EQ(c.finish_reason, "stop");
  EXPECT_EQ(c.prompt_tokens, 12);
  ASSERT_EQ(c.pieces.size(), 1u);
  EXPECT_DOUBLE_EQ(*c.pieces[0].logprob, -0.75);
  ASSERT_EQ(server.requests.size(), 1u);
  EXPECT_EQ(server.requests[0]["model"], "mock-vlm");
  EXPECT_EQ(server.requests[0]["seed"], 42);
  EXPECT_EQ(server.requests[0]["stream"], false);
  EXPECT_FALSE(server.requests[0].contains("continue_final_message"));
  EXPECT_EQ(server.auth[0], "Bearer sk-test");
}

TEST(Transport, RetriesTransientStatus) {
  MockServer server;
  server.replies = {{500, {}}, {429, {}}, {200, {"ok"}}};
  http::ChatTransport t(server.endpoint());
  EXPECT_EQ(t.complete(hello()).text, "ok");
  EXPECT_EQ(server.requests.size(), 3u);
}

TEST(Transport, GivesUpAfterAttempts) {
  MockServer server;
  server.replies = {{503, {}}, {503, {}}, {503, {}}, {200, {"late"}}};
  http::ChatTransport t(server.endpoint());
  try {
    t.complete(hello());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BackendFailure);
  }
  EXPECT_EQ(server.requests.size(), 3u);
}

TEST(Transport, ClientErrorIsNotRetried) {
  MockServer server;
  server.replies = {{400, {}}, {200, {"never"}}};
  http::ChatTransport t(server.endpoint());
  EXPECT_THROW(t.complete(hello()), Error);
  EXPECT_EQ(server.requests.size(), 1u);
}

TEST(Transport, UnreachableEndpoint) {
  http::EndpointConfig c;
  c.url = "http://127.0.0.1:1/v1/chat/completions";
  c.max_attempts = 2;
  c.backoff = std::chrono::milliseconds(1);
  c.timeout_seconds = 1;
  http::ChatTransport t(c);
  EXPECT_THROW(t.complete(hello()), Error);
}

TEST(Transport, StreamStopsEarly) {
  MockServer server;
  server.replies.push_back({200, {"a", "b", "c", "d"}});
  http::ChatTransport t(server.endpoint());
  std::string seen;
  const auto c = t.stream(hello(), [&](const http::StreamDelta& d) {
    seen += d.text;
    return seen.size() < 2;
  });
  EXPECT_EQ(seen, "ab");
  EXPECT_EQ(server.requests[0]["stream"], true);
  EXPECT_EQ(c.pieces.size(), 2u);
}

TEST(Transport, RequestCarriesImagesAsDataUrls) {
  http::EndpointConfig c;
  c.url = "http://localhost:9/v1/chat/completions";
  http::ChatTransport t(c);
  auto img = std::make_shared<Image>(fixtures::ramp_image(4, 4));
  const auto req = t.build_request({{"user", "what?", {img}}, {"assistant", "<think>", {}}}, true, std::nullopt);
  const auto& content = req["messages"][0]["content"];
  ASSERT_EQ(content.size(), 2u);
  EXPECT_TRUE(content[0]["image_url"]["url"].get<std::string>().starts_with("data:image/png;base64,iVBORw0KGgo"));
  EXPECT_EQ(content[1]["text"], "what?");
  EXPECT_EQ(req["continue_final_message"], true);
  EXPECT_EQ(req["add_generation_prompt"], false);
  EXPECT_FALSE(req.contains("seed"));
}

TEST(Png, DecodesToSamePixels) {
  for (int channels : {1, 3}) {
    Image img(13, 7, channels);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<std::uint8_t>(i * 37 % 251);
    const std::string bytes = encode_png(img);
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    ASSERT_TRUE(png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()));
    png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    ASSERT_EQ(png.width, 13u);
    ASSERT_EQ(png.height, 7u);
    std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(png));
    ASSERT_TRUE(png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr));
    EXPECT_EQ(pixels, img.data) << channels;
  }
}

TEST(Base64, KnownVectors) {
  EXPECT_EQ(http::base64_encode(""), "");
  EXPECT_EQ(http::base64_encode("f"), "Zg==");
  EXPECT_EQ(http::base64_encode("fo"), "Zm8=");
  EXPECT_EQ(http::base64_encode("foobar"), "Zm9vYmFy");
}

TEST(RemoteBackend, InterleavedEpisode) {
  MockServer server;
  server.replies.push_back({200, {"<think>look ", "{\"bbox_2d\": [10, 10, ", "50, 40]} and", " more text"}});
  server.replies.push_back({200, {" nothing</think>", "<answer>no</answer>"}});
  RemoteBackend backend(server.endpoint());
  const auto in = fixtures::ramp_input(200, 100);
  const auto t = rollout::run_episode(backend, *in, {}, {});
  EXPECT_EQ(t.transcript, "<think>look {\"bbox_2d\": [10, 10, 50, 40]} nothing</think><answer>no</answer>");
  ASSERT_EQ(t.injected_segment_count(), 1u);
  EXPECT_EQ(t.segments[1].token_span.size(), static_cast<std::size_t>(RemoteBackend::estimate_image_tokens(80, 60)));
  EXPECT_EQ(RemoteBackend::estimate_image_tokens(80, 60), 9);
  EXPECT_TRUE(t.format_ok);

  ASSERT_EQ(server.requests.size(), 2u);
  const auto& second = server.requests[1]["messages"];
  ASSERT_EQ(second.size(), 4u);
  EXPECT_EQ(second[0]["role"], "system");
  EXPECT_EQ(second[0]["content"], std::string(prompts::kSystemInstruction));
  EXPECT_EQ(second[2]["role"], "assistant");
  EXPECT_EQ(second[2]["content"], "<think>look {\"bbox_2d\": [10, 10, 50, 40]}");
  EXPECT_EQ(second[3]["role"], "user");
  EXPECT_EQ(second[3]["content"][0]["type"], "image_url");
  EXPECT_FALSE(server.requests[1].contains("continue_final_message"));
}

TEST(RemoteBackend, ContinuesPartialTurn) {
  MockServer server;
  // The first command sits outside the think block, so it is not executed
  // and the model resumes its own assistant turn. Text streamed past the
  // cut is dropped.
  server.replies.push_back({200, {"{\"bbox_2d\": [1, 1, 9, 9]}", "dropped"}});
  server.replies.push_back({200, {"<think>ok</think><answer>no</answer>"}});
  RemoteBackend backend(server.endpoint());
  const auto t = rollout::run_episode(backend, *fixtures::ramp_input(100, 100), {}, {});
  EXPECT_EQ(t.transcript, "{\"bbox_2d\": [1, 1, 9, 9]}<think>ok</think><answer>no</answer>");
  EXPECT_EQ(t.injected_segment_count(), 0u);
  ASSERT_EQ(server.requests.size(), 2u);
  EXPECT_EQ(server.requests[1]["continue_final_message"], true);
  EXPECT_EQ(server.requests[1]["messages"].back()["content"], "{\"bbox_2d\": [1, 1, 9, 9]}");
}

TEST(RemoteBackend, NotTrainable) {
  RemoteBackend backend(http::EndpointConfig{"http://localhost:9/v1/chat/completions", "m"});
  EXPECT_FALSE(backend.capabilities().can_train);
  try {
    backend.apply_update(std::vector<double>{1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Unsupported);
  }
}

TEST(HttpChatClient, MapsFailures) {
  MockServer server;
  server.replies = {{200, {"yes"}}, {400, {}}};
  vlir::HttpChatClient client(server.endpoint());
  EXPECT_EQ(client.id(), "mock-vlm");
  EXPECT_EQ(client.complete({"Is this region informative?", {}}), "yes");
  try {
    client.complete({"again", {}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ClientFailure);
  }
}
