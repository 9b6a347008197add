#ifndef SAFELABEL_MOCK_SERVER_HPP
#define SAFELABEL_MOCK_SERVER_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "safelabel/probe.hpp"

namespace safelabel {

/// Deterministic bag-of-words embedding: each whitespace token adds +-1 to a
/// hashed coordinate (FNV-1a), and coordinate 0 carries a constant 1 so the
/// vector is never zero.
inline Embedding hashed_embedding(std::string_view text, std::size_t dim = 64) {
  Embedding v(dim, 0.0);
  v[0] = 1.0;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && detail::ascii_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !detail::ascii_space(text[j])) ++j;
    if (j > i) {
      std::uint64_t h = 1469598103934665603ULL;
      for (std::size_t k = i; k < j; ++k) {
        h ^= static_cast<unsigned char>(text[k]);
        h *= 1099511628211ULL;
      }
      const std::size_t slot = dim > 1 ? 1 + static_cast<std::size_t>(h % (dim - 1)) : 0;
      v[slot] += (h >> 63) ? -1.0 : 1.0;
    }
    i = j;
  }
  return v;
}

struct MockFixture {
  /// Rendered prompt -> completion.
  std::map<std::string, std::string> completions;
  std::string default_completion = "UNRELATED";
  std::size_t embedding_dim = 64;
  /// The first n chat requests answer 503 (exercises retries).
  std::size_t transient_failures = 0;
};

inline nlohmann::json to_json(const MockFixture& f) {
  return {{"completions", f.completions},
          {"default", f.default_completion},
          {"embedding_dim", f.embedding_dim},
          {"transient_failures", f.transient_failures}};
}

inline MockFixture mock_fixture_from_json(const nlohmann::json& j) {
  MockFixture f;
  try {
    if (j.contains("completions")) f.completions = j.at("completions").get<std::map<std::string, std::string>>();
    if (j.contains("default")) f.default_completion = j.at("default").get<std::string>();
    if (j.contains("embedding_dim")) f.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    if (j.contains("transient_failures")) f.transient_failures = j.at("transient_failures").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid mock fixture: ") + e.what());
  }
  if (f.embedding_dim < 1) throw ValidationError("embedding_dim must be positive");
  return f;
}

/// Fixture answering the true suffix for the pieces in `echo_ids` and the
/// default completion for everything else.
inline MockFixture echo_fixture(const Population& pop, const ProbeConfig& cfg, const std::set<std::string>& echo_ids) {
  MockFixture f;
  for (const auto& p : pop.pieces()) {
    if (!p.text || !echo_ids.count(p.id)) continue;
    const auto split = split_text(*p.text, cfg.split_fraction);
    f.completions[render_prompt(cfg.prompt_template, split.prefix)] = split.suffix;
  }
  return f;
}

/// OpenAI-compatible test server on 127.0.0.1 serving POST /chat/completions
/// and /embeddings (with or without a /v1 prefix) and GET /stats.
class MockLlmServer {
public:
  explicit MockLlmServer(MockFixture fixture) : fixture_(std::move(fixture)) {
    auto chat = [this](const httplib::Request& req, httplib::Response& res) { on_chat(req, res); };
    auto emb = [this](const httplib::Request& req, httplib::Response& res) { on_embeddings(req, res); };
    for (const char* base : {"", "/v1"}) {
      server_.Post(std::string(base) + "/chat/completions", chat);
      server_.Post(std::string(base) + "/embeddings", emb);
    }
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(stats().dump(), "application/json");
    });
  }

  ~MockLlmServer() { stop(); }
  MockLlmServer(const MockLlmServer&) = delete;
  MockLlmServer& operator=(const MockLlmServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port("127.0.0.1") : (server_.bind_to_port("127.0.0.1", port) ? port : -1);
    if (port_ < 0) throw IoError("mock server cannot bind port " + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stop() is called elsewhere.
  void run(int port) {
    port_ = port == 0 ? server_.bind_to_any_port("127.0.0.1") : (server_.bind_to_port("127.0.0.1", port) ? port : -1);
    if (port_ < 0) throw IoError("mock server cannot bind port " + std::to_string(port));
    server_.listen_after_bind();
  }

  void stop() {
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

  std::size_t chat_requests() const noexcept { return chat_requests_.load(); }
  std::size_t embedding_requests() const noexcept { return embedding_requests_.load(); }
  std::size_t total_requests() const noexcept { return chat_requests() + embedding_requests(); }

  nlohmann::json stats() const {
    return {{"chat_requests", chat_requests()},
            {"embedding_requests", embedding_requests()},
            {"injected_failures", injected_.load()}};
  }

private:
  void on_chat(const httplib::Request& req, httplib::Response& res) {
    const std::size_t n = chat_requests_.fetch_add(1);
    if (n < fixture_.transient_failures) {
      ++injected_;
      res.status = 503;
      res.set_content(R"({"error":"injected"})", "application/json");
      return;
    }
    auto body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("messages") || !body["messages"].is_array() || body["messages"].empty()) {
      res.status = 400;
      res.set_content(R"({"error":"bad request"})", "application/json");
      return;
    }
    const auto prompt = body["messages"].back().value("content", std::string());
    auto it = fixture_.completions.find(prompt);
    const std::string& content = it == fixture_.completions.end() ? fixture_.default_completion : it->second;
    const nlohmann::json out = {
        {"object", "chat.completion"},
        {"model", body.value("model", std::string("mock"))},
        {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}}}}};
    res.set_content(out.dump(), "application/json");
  }

  void on_embeddings(const httplib::Request& req, httplib::Response& res) {
    embedding_requests_.fetch_add(1);
    auto body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.contains("input")) {
      res.status = 400;
      res.set_content(R"({"error":"bad request"})", "application/json");
      return;
    }
    std::vector<std::string> inputs;
    if (body["input"].is_string()) inputs.push_back(body["input"].get<std::string>());
    else for (const auto& x : body["input"]) inputs.push_back(x.get<std::string>());
    nlohmann::json data = nlohmann::json::array();
    for (std::size_t i = 0; i < inputs.size(); ++i)
      data.push_back({{"object", "embedding"}, {"index", i}, {"embedding", hashed_embedding(inputs[i], fixture_.embedding_dim)}});
    res.set_content(nlohmann::json{{"object", "list"}, {"data", data}}.dump(), "application/json");
  }

  MockFixture fixture_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<std::size_t> chat_requests_{0}, embedding_requests_{0}, injected_{0};
};

}  // namespace safelabel

#endif
