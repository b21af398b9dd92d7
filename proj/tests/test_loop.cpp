#include <gtest/gtest.h>

#include "cfr/loop.hpp"
#include "cfr/metrics.hpp"
#include "cfr/serialization.hpp"
#include "fixtures.hpp"

using namespace cfr;

namespace {

const Instance kBoring = fx::review("r1", "The movie was boring.");

std::vector<TransitionKind> transitions(const Trace& t) {
  std::vector<TransitionKind> out;
  for (const auto& r : t.rounds) out.push_back(r.transition);
  return out;
}

}  // namespace

TEST(Loop, FlipAtRoundThreeStopsEarly) {
  auto r = fx::rig(fx::flip_at(3));
  const Trace t = run_instance(kBoring, fx::loop(), r.services(), 1);
  ASSERT_EQ(t.status, TraceStatus::kOk) << t.error;
  EXPECT_EQ(t.target_label, "positive");
  ASSERT_EQ(t.rounds.size(), 4u);
  EXPECT_EQ(t.generator_calls, 4u);
  EXPECT_EQ(r.generator->calls(), 4u);
  EXPECT_EQ(t.classifier_calls, 5u);
  EXPECT_TRUE(t.stopped_early);
  EXPECT_EQ(t.final_round()->candidate_text, "The movie was great.");
  EXPECT_EQ(transitions(t), (std::vector<TransitionKind>{TransitionKind::kFailToFail, TransitionKind::kFailToFail,
                                                         TransitionKind::kFailToFail, TransitionKind::kFailToSuccess}));
  for (int k : {1, 2, 3}) EXPECT_DOUBLE_EQ(pass_at_k({t}, k), 0.0);
  EXPECT_DOUBLE_EQ(pass_at_k({t}, 4), 1.0);
}

TEST(Loop, ConfidenceFeedbackIsCurrentPrediction) {
  auto r = fx::rig(fx::flip_at(3));
  const Trace t = run_instance(kBoring, fx::loop(), r.services(), 1);
  // softmax(2.0, 0.1) -> 0.8699 for negative
  EXPECT_EQ(std::get<ConfidenceFeedback>(t.rounds[1].feedback), (ConfidenceFeedback{"negative", 87}));
  EXPECT_TRUE(std::holds_alternative<NoFeedback>(t.rounds[0].feedback));
}

TEST(Loop, NaturalLanguageAddsCritiqueCalls) {
  auto r = fx::rig(fx::flip_at(3), "replace boring");
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kNaturalLanguage), r.services(), 1);
  ASSERT_EQ(t.rounds.size(), 4u);
  EXPECT_EQ(t.generator_calls, 7u);
  EXPECT_EQ(std::get<NaturalLanguageFeedback>(t.rounds[2].feedback).critique, "replace boring");
}

TEST(Loop, AttributionFeedbackUsesLooWords) {
  auto r = fx::rig(fx::flip_at(1));
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kAttribution), r.services(), 1);
  ASSERT_EQ(t.rounds.size(), 2u);
  const auto& fb = std::get<AttributionFeedback>(t.rounds[1].feedback);
  EXPECT_EQ(fb.method, "loo");
  ASSERT_EQ(fb.words.size(), 4u);
  EXPECT_EQ(fb.words.front().word, "boring.");
  // original classification, LOO (d + 1), round classifications
  EXPECT_EQ(t.classifier_calls, 1u + 5u + 2u);
}

TEST(Loop, ZeroIterationsIsSinglePass) {
  auto r = fx::rig(fx::flip_at(3));
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kConfidence, 0), r.services(), 1);
  EXPECT_EQ(t.rounds.size(), 1u);
  EXPECT_FALSE(t.final_round()->valid);
  EXPECT_FALSE(t.stopped_early);
}

TEST(Loop, NeverFlippingRunsAllRounds) {
  auto r = fx::rig({});
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kNone, 5), r.services(), 1);
  EXPECT_EQ(t.rounds.size(), 6u);
  for (auto k : transitions(t)) EXPECT_EQ(k, TransitionKind::kFailToFail);
  EXPECT_FALSE(t.first_valid_round());
}

TEST(Loop, OscillationWithoutEarlyStop) {
  auto r = fx::rig(fx::oscillating(5));
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kConfidence, 5, false), r.services(), 1);
  ASSERT_EQ(t.rounds.size(), 6u);
  EXPECT_EQ(transitions(t),
            (std::vector<TransitionKind>{TransitionKind::kFailToSuccess, TransitionKind::kSuccessToFail,
                                         TransitionKind::kFailToSuccess, TransitionKind::kSuccessToFail,
                                         TransitionKind::kFailToSuccess, TransitionKind::kSuccessToFail}));
  EXPECT_FALSE(t.final_round()->valid);
  EXPECT_FALSE(t.stopped_early);

  auto e = fx::rig(fx::oscillating(5));
  const Trace s = run_instance(kBoring, fx::loop(FeedbackKind::kConfidence, 5, true), e.services(), 1);
  EXPECT_EQ(s.rounds.size(), 1u);
  EXPECT_TRUE(s.final_round()->valid);
}

TEST(Loop, RefinementAfterFlipUsesPreservingTemplate) {
  std::vector<std::string> prompts;
  auto r = fx::rig({});
  r.generator = std::make_unique<mock::FunctionGenerator>([&](const std::string& p) {
    prompts.push_back(p);
    return std::string("<cf>The movie was great.</cf>");
  });
  run_instance(kBoring, fx::loop(FeedbackKind::kConfidence, 1, false), r.services(), 1);
  ASSERT_EQ(prompts.size(), 2u);
  EXPECT_NE(prompts[1].find("preserving the current label: positive"), std::string::npos);
  EXPECT_NE(prompts[1].find("Current counterfactual:\nThe movie was great."), std::string::npos);
}

TEST(Loop, ParseFailureCarriesPreviousCandidate) {
  auto r = fx::rig({{"boring", "great", 0, std::nullopt, true}, {"", "", 1, std::nullopt, false}});
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kNone, 1, false), r.services(), 1);
  ASSERT_EQ(t.rounds.size(), 2u);
  EXPECT_TRUE(t.rounds[1].parse_failed);
  EXPECT_EQ(t.rounds[1].candidate_text, "The movie was great.");
  EXPECT_EQ(t.rounds[1].transition, TransitionKind::kPreviousSuccess);
}

TEST(Loop, TransportFailureAbortsWithPartialRounds) {
  int n = 0;
  auto r = fx::rig({});
  r.generator = std::make_unique<mock::FunctionGenerator>([&](const std::string&) -> std::string {
    if (++n == 3) throw TransportError("generator unreachable", 3);
    return "<cf>The movie was awful.</cf>";
  });
  const Trace t = run_instance(kBoring, fx::loop(FeedbackKind::kNone, 5), r.services(), 1);
  EXPECT_EQ(t.status, TraceStatus::kAborted);
  EXPECT_EQ(t.rounds.size(), 2u);
  EXPECT_NE(t.error.find("generator unreachable"), std::string::npos);
}

TEST(Loop, InvalidTargetOverrideAborts) {
  Instance in = kBoring;
  in.target_label = "negative";
  auto r = fx::rig({});
  const Trace t = run_instance(in, fx::loop(), r.services(), 1);
  EXPECT_EQ(t.status, TraceStatus::kAborted);
  EXPECT_TRUE(t.rounds.empty());
}

TEST(Loop, AttributionWithoutMethodIsConfigError) {
  LoopConfig c = fx::loop(FeedbackKind::kAttribution);
  c.method.reset();
  auto r = fx::rig({});
  EXPECT_THROW(run_instance(kBoring, c, r.services(), 1), Error);
}

TEST(Loop, TracesAreByteIdenticalAcrossReruns) {
  for (auto kind : {FeedbackKind::kConfidence, FeedbackKind::kAttribution, FeedbackKind::kNaturalLanguage}) {
    std::string a, b;
    for (std::string* out : {&a, &b}) {
      auto r = fx::rig(fx::flip_at(2));
      LoopConfig c = fx::loop(kind);
      if (kind == FeedbackKind::kAttribution) {
        c.method = AttributionMethod::kLime;
        c.selection = WordSelection::kRandom;
      }
      *out = dump_line(to_json(run_instance(kBoring, c, r.services(), 99)));
    }
    EXPECT_EQ(a, b) << to_string(kind);
  }
}

TEST(Loop, DescribedEnumsRoundTrip) {
  for (auto k : {FeedbackKind::kNone, FeedbackKind::kConfidence, FeedbackKind::kAttribution,
                 FeedbackKind::kNaturalLanguage}) {
    EXPECT_EQ(parse_feedback_kind(to_string(k)), k);
  }
  EXPECT_EQ(parse_attribution_method("shap"), AttributionMethod::kKernelShap);
  EXPECT_THROW(parse_attribution_method("gradcam"), Error);
}

TEST(Loop, FeedbackWordsJoinedByScore) {
  EXPECT_EQ(join_feedback_words({{"a", 0.1, 0}, {"b", 0.5, 1}, {"c", 0.3, 2}}), "b, c, a");
}
