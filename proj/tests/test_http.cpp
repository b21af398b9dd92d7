#include <gtest/gtest.h>

#include <cmath>

#include "cfr/http.hpp"
#include "cfr/loop.hpp"
#include "fixtures.hpp"

using namespace cfr;

namespace {

struct Served {
  std::unique_ptr<mock::LexiconClassifier> classifier = fx::lexicon();
  mock::ScriptedGenerator generator{fx::flip_at(1), "make it upbeat"};
  mock::HashEmbedder embedder{16};
  mock::UnigramScorer scorer{{{"a", 0.25}, {"b", 0.25}}};
  http::ServiceServer server{http::ServedServices{
      classifier.get(), &generator, &embedder, &scorer, [](const std::string& text, const Label&) {
        std::vector<AttributionSpan> spans{{"[CLS]", 0.0}};
        for (const auto& w : word_strings(text)) spans.push_back({w, static_cast<double>(w.size())});
        return spans;
      }}};
  int port = server.start();

  http::EndpointConfig endpoint(int retries = 2) const {
    http::EndpointConfig e;
    e.url = server.url();
    e.max_retries = retries;
    e.backoff = std::chrono::milliseconds(1);
    e.timeout = std::chrono::seconds(5);
    return e;
  }
};

}  // namespace

TEST(Http, ClassifierRoundTrip) {
  Served s;
  http::HttpClassifier c(fx::sentiment(), s.endpoint());
  const TextFields f{{"text", "The movie was boring."}};
  const auto out = c.classify_once(f);
  EXPECT_EQ(out.prediction, s.classifier->classify_once(f).prediction);
  EXPECT_EQ(out.token_count, 4u);
  EXPECT_EQ(c.model_id(), "mock-lexicon");
}

TEST(Http, LoopRunsOverTheWire) {
  Served s;
  http::HttpClassifier c(fx::sentiment(), s.endpoint());
  http::HttpGenerator g(s.endpoint());
  WindowedClassifier w(c, WindowConfig{});
  PromptSet prompts;
  const Trace t = run_instance(fx::review("r", "The movie was boring."), fx::loop(), {&w, &g, nullptr, &prompts}, 4);
  ASSERT_EQ(t.status, TraceStatus::kOk) << t.error;
  EXPECT_EQ(t.rounds.size(), 2u);
  EXPECT_TRUE(t.final_round()->valid);
}

TEST(Http, EmbedScoreAttribute) {
  Served s;
  http::HttpEmbedder e(s.endpoint());
  const auto remote = e.embed("a b");
  const auto local = s.embedder.embed("a b");
  ASSERT_EQ(remote.size(), local.size());
  for (std::size_t i = 0; i < local.size(); ++i) EXPECT_NEAR(remote[i], local[i], 1e-12);
  http::HttpTokenScorer sc(s.endpoint());
  const auto scored = sc.score_tokens("a b");
  ASSERT_EQ(scored.logprobs.size(), 2u);
  EXPECT_DOUBLE_EQ(scored.logprobs[0], std::log(0.25));
  http::HttpAttributionService a(s.endpoint());
  const auto r = a.attribute("big cat", "positive");
  EXPECT_EQ(r.words, (std::vector<std::string>{"big", "cat"}));
  EXPECT_EQ(r.scores, (std::vector<double>{3.0, 3.0}));
}

TEST(Http, RetriesServerErrors) {
  Served s;
  http::HttpGenerator g(s.endpoint(2));
  s.server.fail_next(2);
  EXPECT_NE(g.generate("hello", {}).find("<cf>"), std::string::npos);
  EXPECT_EQ(s.server.requests(), 3u);
}

TEST(Http, TransportErrorAfterRetries) {
  Served s;
  http::HttpGenerator g(s.endpoint(1));
  s.server.fail_next(5);
  try {
    g.generate("hello", {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTransport);
    EXPECT_NE(std::string(e.what()).find("after 2 attempts"), std::string::npos) << e.what();
  }
  EXPECT_EQ(s.server.requests(), 2u);
}

TEST(Http, UnreachableHost) {
  http::EndpointConfig e;
  e.url = "http://127.0.0.1:1";
  e.max_retries = 0;
  e.backoff = std::chrono::milliseconds(1);
  e.timeout = std::chrono::seconds(2);
  http::HttpEmbedder emb(e);
  EXPECT_THROW(emb.embed("x"), Error);
}

TEST(Http, ClientErrorIsProtocolNotRetried) {
  Served s;
  http::Channel ch(s.endpoint(3));
  try {
    ch.post("/classify", Json{{"nope", 1}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kProtocol);
  }
  EXPECT_EQ(s.server.requests(), 1u);
}
