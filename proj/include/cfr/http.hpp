#pragma once

// HTTP/JSON clients for the model services, plus an in-process server that
// exposes any service objects over the same protocol (used by tests and the
// `serve` verb).
//
//   POST /classify  {fields:{name:text}}            -> {label, probs:{label:p}, model_id, token_count?}
//   POST /generate  {prompt, temperature, top_p, top_k, max_new_tokens, seed?} -> {text, model_id}
//   POST /embed     {text}                          -> {vector:[...], model_id}
//   POST /score     {text}                          -> {tokens:[...], logprobs:[...], model_id}
//   POST /attribute {text, label}                   -> {spans:[{text, score}], model_id}

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
// resolv.h defines _res, which collides with Eigen parameter names
#ifdef _res
#undef _res
#endif

#include "cfr/errors.hpp"
#include "cfr/serialization.hpp"
#include "cfr/services.hpp"

namespace cfr::http {

struct EndpointConfig {
  std::string url;  // http://host:port[/prefix]
  std::string token;
  int max_retries = 3;
  std::chrono::milliseconds backoff{250};
  std::size_t max_in_flight = 8;
  std::chrono::seconds timeout{120};
};

// Environment fallbacks; explicit config values win.
inline std::string env_or(const char* name, const std::string& configured) {
  if (!configured.empty()) return configured;
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

inline constexpr const char* kTokenEnv = "CFR_API_TOKEN";

class Semaphore {
 public:
  explicit Semaphore(std::size_t n) : free_(n) {}
  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return free_ > 0; });
    --free_;
  }
  void release() {
    {
      std::lock_guard lock(mu_);
      ++free_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t free_;
};

// One service endpoint: retries, bearer auth, in-flight cap.
class Channel {
 public:
  explicit Channel(EndpointConfig cfg) : cfg_(std::move(cfg)), gate_(std::max<std::size_t>(1, cfg_.max_in_flight)) {
    if (cfg_.url.empty()) throw Error(ErrorCode::kConfig, "service URL is empty");
    const auto scheme = cfg_.url.find("://");
    const auto slash = cfg_.url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
    host_ = cfg_.url.substr(0, slash);
    if (slash != std::string::npos) prefix_ = cfg_.url.substr(slash);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  Json post(const std::string& path, const Json& body) {
    gate_.acquire();
    struct Release {
      Semaphore& s;
      ~Release() { s.release(); }
    } release{gate_};

    const std::string payload = body.dump();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(cfg_.backoff * (1 << (attempt - 1)));
      wire_calls_.fetch_add(1, std::memory_order_relaxed);
      httplib::Client cli(host_);
      cli.set_connection_timeout(cfg_.timeout);
      cli.set_read_timeout(cfg_.timeout);
      cli.set_write_timeout(cfg_.timeout);
      if (!cfg_.token.empty()) cli.set_bearer_token_auth(cfg_.token);
      auto res = cli.Post(prefix_ + path, payload, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw Error(ErrorCode::kProtocol, path + " returned HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      try {
        Json out = Json::parse(res->body);
        if (!out.is_object()) throw Error(ErrorCode::kProtocol, path + " response is not an object");
        if (auto it = out.find("model_id"); it != out.end() && it->is_string()) {
          std::lock_guard lock(mu_);
          model_id_ = it->get<std::string>();
        }
        return out;
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::kProtocol, path + " response is not JSON: " + e.what());
      }
    }
    throw TransportError(cfg_.url + path + ": " + last_error, cfg_.max_retries + 1);
  }

  std::string model_id() const {
    std::lock_guard lock(mu_);
    return model_id_.empty() ? cfg_.url : model_id_;
  }
  std::size_t wire_calls() const noexcept { return wire_calls_.load(std::memory_order_relaxed); }

 private:
  EndpointConfig cfg_;
  std::string host_;
  std::string prefix_;
  Semaphore gate_;
  mutable std::mutex mu_;
  std::string model_id_;
  std::atomic<std::size_t> wire_calls_{0};
};

namespace detail {

template <typename T>
T response_field(const Json& j, const char* key, const char* endpoint) {
  auto it = j.find(key);
  if (it == j.end()) throw Error(ErrorCode::kProtocol, std::string(endpoint) + " response lacks '" + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kProtocol, std::string(endpoint) + " response field '" + key + "': " + e.what());
  }
}

}  // namespace detail

class HttpClassifier : public Classifier {
 public:
  HttpClassifier(LabelSpace labels, EndpointConfig cfg) : Classifier(std::move(labels)), channel_(std::move(cfg)) {}
  std::string model_id() const override { return channel_.model_id(); }
  const Channel& channel() const noexcept { return channel_; }

 protected:
  ClassifierOutput do_classify(const TextFields& fields) override {
    const Json res = channel_.post("/classify", Json{{"fields", to_json(fields)}});
    const auto label = detail::response_field<std::string>(res, "label", "/classify");
    const Json probs = detail::response_field<Json>(res, "probs", "/classify");
    std::vector<std::pair<Label, double>> pairs;
    for (auto it = probs.begin(); it != probs.end(); ++it) {
      if (!it.value().is_number()) throw Error(ErrorCode::kProtocol, "/classify probability is not a number");
      pairs.emplace_back(it.key(), it.value().get<double>());
    }
    ClassifierOutput out{make_prediction(labels(), pairs), std::nullopt};
    if (out.prediction.prob(label) < out.prediction.prob(out.prediction.label)) {
      throw Error(ErrorCode::kProtocol, "/classify label '" + label + "' is not the argmax");
    }
    if (auto it = res.find("token_count"); it != res.end() && it->is_number_unsigned()) {
      out.token_count = it->get<std::size_t>();
    }
    return out;
  }

 private:
  Channel channel_;
};

class HttpGenerator : public Generator {
 public:
  explicit HttpGenerator(EndpointConfig cfg) : channel_(std::move(cfg)) {}
  std::string model_id() const override { return channel_.model_id(); }

 protected:
  std::string do_generate(const std::string& prompt, const GenerationParams& p) override {
    Json body{{"prompt", prompt},
              {"temperature", p.temperature},
              {"top_p", p.top_p},
              {"top_k", p.top_k},
              {"max_new_tokens", p.max_new_tokens}};
    if (p.seed) body["seed"] = *p.seed;
    return detail::response_field<std::string>(channel_.post("/generate", body), "text", "/generate");
  }

 private:
  Channel channel_;
};

class HttpEmbedder : public Embedder {
 public:
  explicit HttpEmbedder(EndpointConfig cfg) : channel_(std::move(cfg)) {}
  std::string model_id() const override { return channel_.model_id(); }

 protected:
  std::vector<double> do_embed(const std::string& text) override {
    return detail::response_field<std::vector<double>>(channel_.post("/embed", Json{{"text", text}}), "vector",
                                                       "/embed");
  }

 private:
  Channel channel_;
};

class HttpTokenScorer : public TokenScorer {
 public:
  explicit HttpTokenScorer(EndpointConfig cfg) : channel_(std::move(cfg)) {}
  std::string model_id() const override { return channel_.model_id(); }

 protected:
  ScoredTokens do_score(const std::string& text) override {
    const Json res = channel_.post("/score", Json{{"text", text}});
    return ScoredTokens{detail::response_field<std::vector<std::string>>(res, "tokens", "/score"),
                        detail::response_field<std::vector<double>>(res, "logprobs", "/score")};
  }

 private:
  Channel channel_;
};

class HttpAttributionService : public AttributionService {
 public:
  explicit HttpAttributionService(EndpointConfig cfg) : channel_(std::move(cfg)) {}
  std::string model_id() const override { return channel_.model_id(); }

 protected:
  std::vector<AttributionSpan> do_attribute(const std::string& text, const Label& label) override {
    const Json res = channel_.post("/attribute", Json{{"text", text}, {"label", label}});
    std::vector<AttributionSpan> spans;
    for (const auto& s : detail::response_field<Json>(res, "spans", "/attribute")) {
      spans.push_back({detail::response_field<std::string>(s, "text", "/attribute"),
                       detail::response_field<double>(s, "score", "/attribute")});
    }
    return spans;
  }

 private:
  Channel channel_;
};

// ---------------------------------------------------------------------------
// Server side

struct ServedServices {
  Classifier* classifier = nullptr;
  Generator* generator = nullptr;
  Embedder* embedder = nullptr;
  TokenScorer* scorer = nullptr;
  std::function<std::vector<AttributionSpan>(const std::string&, const Label&)> attribute;
};

class ServiceServer {
 public:
  explicit ServiceServer(ServedServices s) : services_(std::move(s)) { install(); }
  ~ServiceServer() { stop(); }
  ServiceServer(const ServiceServer&) = delete;
  ServiceServer& operator=(const ServiceServer&) = delete;

  // Binds 127.0.0.1 (port 0 = any) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw Error(ErrorCode::kIo, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Blocks the caller; for the CLI.
  void serve_forever(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw Error(ErrorCode::kIo, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  // The next `n` requests answer 503 (transport-fault injection).
  void fail_next(int n) { failures_.store(n); }
  std::size_t requests() const noexcept { return requests_.load(); }

 private:
  using Handler = std::function<Json(const Json&)>;

  void route(const std::string& path, Handler h) {
    server_.Post(path, [this, h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      requests_.fetch_add(1);
      if (failures_.load() > 0 && failures_.fetch_sub(1) > 0) {
        res.status = 503;
        return;
      }
      try {
        res.set_content(h(Json::parse(req.body)).dump(), "application/json");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(Json{{"error", e.what()}}.dump(), "application/json");
      }
    });
  }

  void install() {
    if (services_.classifier) {
      route("/classify", [this](const Json& body) {
        ClassifierOutput out = services_.classifier->classify_once(fields_from_json(body.at("fields")));
        Json j = to_json(out.prediction);
        j["model_id"] = services_.classifier->model_id();
        if (out.token_count) j["token_count"] = *out.token_count;
        return j;
      });
    }
    if (services_.generator) {
      route("/generate", [this](const Json& body) {
        GenerationParams p;
        p.temperature = body.value("temperature", p.temperature);
        p.top_p = body.value("top_p", p.top_p);
        p.top_k = body.value("top_k", p.top_k);
        p.max_new_tokens = body.value("max_new_tokens", p.max_new_tokens);
        if (body.contains("seed")) p.seed = body.at("seed").get<std::uint64_t>();
        return Json{{"text", services_.generator->generate(body.at("prompt").get<std::string>(), p)},
                    {"model_id", services_.generator->model_id()}};
      });
    }
    if (services_.embedder) {
      route("/embed", [this](const Json& body) {
        return Json{{"vector", services_.embedder->embed(body.at("text").get<std::string>())},
                    {"model_id", services_.embedder->model_id()}};
      });
    }
    if (services_.scorer) {
      route("/score", [this](const Json& body) {
        ScoredTokens s = services_.scorer->score_tokens(body.at("text").get<std::string>());
        return Json{{"tokens", s.tokens}, {"logprobs", s.logprobs}, {"model_id", services_.scorer->model_id()}};
      });
    }
    if (services_.attribute) {
      route("/attribute", [this](const Json& body) {
        Json spans = Json::array();
        for (const auto& s : services_.attribute(body.at("text").get<std::string>(), body.at("label").get<std::string>())) {
          spans.push_back(Json{{"text", s.text}, {"score", s.score}});
        }
        return Json{{"spans", spans}, {"model_id", "mock-attribution"}};
      });
    }
  }

  ServedServices services_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<int> failures_{0};
  std::atomic<std::size_t> requests_{0};
};

}  // namespace cfr::http
