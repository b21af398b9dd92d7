#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfr/metrics.hpp"
#include "cfr/mocks.hpp"

using namespace cfr;

namespace {

using Row = std::vector<std::optional<int>>;

// rater-major input, transposed into values[item][rater]
RatingsMatrix grid(const std::vector<Row>& by_rater) {
  RatingsMatrix m;
  for (std::size_t r = 0; r < by_rater.size(); ++r) m.raters.push_back("r" + std::to_string(r));
  const std::size_t n = by_rater.front().size();
  for (std::size_t i = 0; i < n; ++i) {
    m.items.push_back("i" + std::to_string(i));
    Row row;
    for (const auto& rater : by_rater) row.push_back(rater[i]);
    m.values.push_back(row);
  }
  return m;
}

constexpr std::optional<int> na = std::nullopt;

// 3 raters x 10 items, two missing cells (tests/oracles/oracles.py GRID).
RatingsMatrix reference_grid() {
  return grid({{5, 4, 6, 3, 2, 5, 4, 1, 6, 3}, {5, 5, 6, 2, 2, 4, 4, 2, 5, na}, {4, 4, 5, 3, 1, 5, na, 1, 6, 3}});
}

// Canonical 4-rater, 12-item reliability data with missing values.
RatingsMatrix canonical_grid() {
  return grid({{1, 2, 3, 3, 2, 1, 4, 1, 2, na, na, na},
               {1, 2, 3, 3, 2, 2, 4, 1, 2, 5, na, 3},
               {na, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, na},
               {1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, na}});
}

Trace trace_valid_at(std::optional<int> first_valid, int rounds) {
  Trace t;
  for (int k = 0; k < rounds; ++k) {
    CandidateRound r;
    r.k = k;
    r.valid = first_valid && k >= *first_valid;
    t.rounds.push_back(r);
  }
  return t;
}

}  // namespace

TEST(Lfr, ThreeOfFive) {
  EXPECT_EQ(lfr({"a", "a", "a", "b", "b"}, {"b", "b", "b", "b", "b"}), 0.6);
  EXPECT_THROW(lfr({"a"}, {}), Error);
}

TEST(Perplexity, UniformUnigramEqualsVocabSize) {
  for (int v : {2, 10, 50000}) {
    ScoredTokens s;
    s.logprobs.assign(37, std::log(1.0 / v));
    EXPECT_NEAR(perplexity(s), v, 1e-9 * v);
  }
}

// exp(-(ln 0.1 + ln 0.4)/2) = 1/sqrt(0.04) = 5
TEST(Perplexity, HandExample) {
  ScoredTokens s;
  s.logprobs = {std::log(0.1), std::log(0.4)};
  EXPECT_NEAR(perplexity(s), 5.0, 1e-12);
  EXPECT_THROW(perplexity(ScoredTokens{}), Error);
}

TEST(Similarity, IdenticalOrthogonalAndDiagonal) {
  EXPECT_EQ(cosine({1.0, 0.0}, {1.0, 0.0}), 1.0);
  EXPECT_EQ(cosine({1.0, 0.0}, {0.0, 1.0}), 0.0);
  EXPECT_NEAR(cosine({1.0, 0.0}, {1.0, 1.0}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine({0.0, 0.0}, {1.0, 0.0}), Error);
  mock::HashEmbedder e(64);
  EXPECT_NEAR(semantic_similarity({"a b c"}, {"c b a"}, e), 1.0, 1e-12);
}

TEST(PassAtK, FirstValidWithinKAttempts) {
  const std::vector<Trace> ts{trace_valid_at(0, 1), trace_valid_at(2, 3), trace_valid_at(std::nullopt, 6),
                              trace_valid_at(5, 6)};
  EXPECT_DOUBLE_EQ(pass_at_k(ts, 1), 0.25);
  EXPECT_DOUBLE_EQ(pass_at_k(ts, 3), 0.5);
  EXPECT_DOUBLE_EQ(pass_at_k(ts, 6), 0.75);
  EXPECT_THROW(pass_at_k(ts, 0), Error);
  for (int k = 1; k < 6; ++k) EXPECT_LE(pass_at_k(ts, k), pass_at_k(ts, k + 1));
}

TEST(Alpha, PerfectAgreementIsOne) {
  EXPECT_DOUBLE_EQ(krippendorff_alpha(grid({{1, 2, 3, 4}, {1, 2, 3, 4}, {1, 2, 3, na}})), 1.0);
  EXPECT_DOUBLE_EQ(krippendorff_alpha(grid({{6, 1, 3}, {6, 1, 3}}), MetricLevel::kInterval), 1.0);
}

// Values frozen from tests/oracles/oracles.py (pairwise coincidence form).
TEST(Alpha, ReferenceGridMatchesOracle) {
  EXPECT_NEAR(krippendorff_alpha(reference_grid(), MetricLevel::kOrdinal), 0.87553637210055457, 1e-9);
  EXPECT_NEAR(krippendorff_alpha(reference_grid(), MetricLevel::kInterval), 0.88773388773388773, 1e-9);
}

TEST(Alpha, CanonicalReliabilityData) {
  EXPECT_NEAR(krippendorff_alpha(canonical_grid(), MetricLevel::kOrdinal), 0.81538750375488134, 1e-9);
  EXPECT_NEAR(krippendorff_alpha(canonical_grid(), MetricLevel::kInterval), 0.849, 5e-4);
}

TEST(Alpha, ConstantGridIsPerfectButUnpairedIsUndefined) {
  EXPECT_DOUBLE_EQ(krippendorff_alpha(grid({{3, 3, 3}, {3, 3, 3}})), 1.0);
  try {
    krippendorff_alpha(grid({{3, na, 2}, {na, 4, na}}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUndefinedAgreement);
  }
  EXPECT_THROW(krippendorff_alpha(grid({{1, 2}})), Error);
}

TEST(Alpha, SystematicDisagreementIsNegative) {
  EXPECT_LT(krippendorff_alpha(grid({{1, 6, 1, 6}, {6, 1, 6, 1}})), 0.0);
}

TEST(Alpha, InvariantToRaterOrder) {
  const auto a = krippendorff_alpha(reference_grid());
  auto m = reference_grid();
  for (auto& row : m.values) std::reverse(row.begin(), row.end());
  EXPECT_NEAR(krippendorff_alpha(m), a, 1e-12);
}

TEST(Correlation, KendallTauB) {
  EXPECT_NEAR(*kendall_tau_b({1, 2, 3, 4}, {1, 3, 2, 4}), 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(*kendall_tau_b({1, 2, 3}, {3, 2, 1}), -1.0);
  EXPECT_FALSE(kendall_tau_b({1, 1, 1}, {1, 2, 3}));
  EXPECT_THROW(correlation({1, 1}, {1, 2}, CorrelationMethod::kKendall), Error);
}

TEST(Correlation, PearsonSpearman) {
  EXPECT_NEAR(correlation({1, 2, 3}, {2, 4, 6}, CorrelationMethod::kPearson), 1.0, 1e-15);
  EXPECT_NEAR(correlation({1, 2, 3, 4}, {1, 4, 9, 100}, CorrelationMethod::kSpearman), 1.0, 1e-15);
}

TEST(Correlation, RandomizedBounds) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(12), b(12);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    for (auto m : {CorrelationMethod::kPearson, CorrelationMethod::kSpearman, CorrelationMethod::kKendall}) {
      const double c = correlation(a, b, m);
      EXPECT_GE(c, -1.0 - 1e-12);
      EXPECT_LE(c, 1.0 + 1e-12);
      EXPECT_NEAR(correlation(a, a, m), 1.0, 1e-12);
    }
  }
}
