#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cfr/core.hpp"
#include "cfr/errors.hpp"
#include "cfr/services.hpp"

namespace cfr {

// Fraction of positions whose label changed.
inline double lfr(const std::vector<Label>& original, const std::vector<Label>& counterfactual) {
  if (original.size() != counterfactual.size()) {
    throw Error(ErrorCode::kInput, "lfr needs equal-length prediction lists");
  }
  if (original.empty()) throw Error(ErrorCode::kInput, "lfr needs at least one instance");
  std::size_t flips = 0;
  for (std::size_t i = 0; i < original.size(); ++i) flips += original[i] != counterfactual[i];
  return static_cast<double>(flips) / static_cast<double>(original.size());
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kProtocol, "embedding dimensions differ");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::kDegenerateEmbedding, "zero-norm embedding");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// Mean cosine similarity between paired texts; `embed` maps text -> vector.
template <typename EmbedFn>
  requires std::invocable<EmbedFn&, const std::string&>
double semantic_similarity(const std::vector<std::string>& originals,
                           const std::vector<std::string>& counterfactuals, EmbedFn&& embed) {
  if (originals.size() != counterfactuals.size()) {
    throw Error(ErrorCode::kInput, "semantic similarity needs equal-length text lists");
  }
  if (originals.empty()) throw Error(ErrorCode::kInput, "semantic similarity needs at least one pair");
  double sum = 0.0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    sum += cosine(embed(originals[i]), embed(counterfactuals[i]));
  }
  return sum / static_cast<double>(originals.size());
}

inline double semantic_similarity(const std::vector<std::string>& originals,
                                  const std::vector<std::string>& counterfactuals, Embedder& embedder) {
  return semantic_similarity(originals, counterfactuals,
                             [&](const std::string& s) { return embedder.embed(s); });
}

// exp(-(1/n) * sum log p(t_i | t_<i))
inline double perplexity(const ScoredTokens& scored) {
  if (scored.logprobs.empty()) throw Error(ErrorCode::kInput, "perplexity of an empty token list");
  double sum = 0.0;
  for (double lp : scored.logprobs) sum += lp;
  return std::exp(-sum / static_cast<double>(scored.logprobs.size()));
}

// Fraction of traces whose first valid round lies within the first k
// attempts (round 0 is attempt 1). Aborted traces count as failures.
inline double pass_at_k(const std::vector<Trace>& traces, int k) {
  if (k < 1) throw Error(ErrorCode::kInput, "pass@k needs k >= 1");
  if (traces.empty()) return 0.0;
  std::size_t passed = 0;
  for (const auto& t : traces) {
    auto first = t.first_valid_round();
    if (first && *first < k) ++passed;
  }
  return static_cast<double>(passed) / static_cast<double>(traces.size());
}

// ---------------------------------------------------------------------------
// Krippendorff's alpha

struct RatingsMatrix {
  std::vector<std::string> raters;
  std::vector<std::string> items;
  // values[item][rater]
  std::vector<std::vector<std::optional<int>>> values;

  void validate() const {
    if (raters.size() < 2) throw Error(ErrorCode::kInput, "ratings need at least two raters");
    if (values.size() != items.size()) throw Error(ErrorCode::kInput, "ratings rows do not match items");
    for (const auto& row : values) {
      if (row.size() != raters.size()) throw Error(ErrorCode::kInput, "ratings row does not match raters");
    }
  }
};

enum class MetricLevel { kOrdinal, kInterval };

inline MetricLevel parse_metric_level(std::string_view s) {
  if (s == "ordinal") return MetricLevel::kOrdinal;
  if (s == "interval") return MetricLevel::kInterval;
  throw Error(ErrorCode::kConfig, "unknown alpha metric level '" + std::string(s) + "'");
}

// Coincidence-matrix formulation: alpha = 1 - D_o / D_e.
inline double krippendorff_alpha(const RatingsMatrix& m, MetricLevel level = MetricLevel::kOrdinal) {
  m.validate();
  std::vector<int> values;
  for (const auto& row : m.values) {
    std::size_t count = 0;
    for (const auto& v : row) count += v.has_value();
    if (count < 2) continue;
    for (const auto& v : row) {
      if (v) values.push_back(*v);
    }
  }
  if (values.empty()) throw Error(ErrorCode::kUndefinedAgreement, "no item is rated by two or more raters");
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  const std::size_t V = values.size();
  auto index = [&](int v) {
    return static_cast<std::size_t>(std::lower_bound(values.begin(), values.end(), v) - values.begin());
  };

  std::vector<std::vector<double>> o(V, std::vector<double>(V, 0.0));
  for (const auto& row : m.values) {
    std::vector<std::size_t> present;
    for (const auto& v : row) {
      if (v) present.push_back(index(*v));
    }
    if (present.size() < 2) continue;
    const double w = 1.0 / static_cast<double>(present.size() - 1);
    for (std::size_t a = 0; a < present.size(); ++a) {
      for (std::size_t b = 0; b < present.size(); ++b) {
        if (a != b) o[present[a]][present[b]] += w;
      }
    }
  }
  std::vector<double> n_c(V, 0.0);
  double n = 0.0;
  for (std::size_t c = 0; c < V; ++c) {
    for (std::size_t k = 0; k < V; ++k) n_c[c] += o[c][k];
    n += n_c[c];
  }

  auto delta2 = [&](std::size_t c, std::size_t k) {
    if (level == MetricLevel::kInterval) {
      const double d = static_cast<double>(values[c]) - static_cast<double>(values[k]);
      return d * d;
    }
    const std::size_t lo = std::min(c, k);
    const std::size_t hi = std::max(c, k);
    double s = 0.0;
    for (std::size_t g = lo; g <= hi; ++g) s += n_c[g];
    s -= (n_c[c] + n_c[k]) / 2.0;
    return s * s;
  };

  double observed = 0.0;
  double expected = 0.0;
  for (std::size_t c = 0; c < V; ++c) {
    for (std::size_t k = 0; k < V; ++k) {
      const double d2 = delta2(c, k);
      observed += o[c][k] * d2;
      expected += n_c[c] * n_c[k] * d2;
    }
  }
  if (observed == 0.0) return 1.0;
  if (expected == 0.0) throw Error(ErrorCode::kUndefinedAgreement, "no expected disagreement");
  return 1.0 - (n - 1.0) * observed / expected;
}

// ---------------------------------------------------------------------------
// Correlation

enum class CorrelationMethod { kPearson, kSpearman, kKendall };

inline CorrelationMethod parse_correlation_method(std::string_view s) {
  if (s == "pearson") return CorrelationMethod::kPearson;
  if (s == "spearman") return CorrelationMethod::kSpearman;
  if (s == "kendall") return CorrelationMethod::kKendall;
  throw Error(ErrorCode::kConfig, "unknown correlation method '" + std::string(s) + "'");
}

namespace detail {

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw Error(ErrorCode::kUndefinedCorrelation, "constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// 1-based average ranks.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

// Tie-adjusted Kendall tau-b; nullopt when either input is constant.
inline std::optional<double> kendall_tau_b(const std::vector<double>& a, const std::vector<double>& b) {
  double concordant = 0.0;
  double discordant = 0.0;
  double ties_a = 0.0;
  double ties_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j];
      const double db = b[i] - b[j];
      if (da == 0.0 && db == 0.0) continue;
      if (da == 0.0) {
        ties_a += 1.0;
      } else if (db == 0.0) {
        ties_b += 1.0;
      } else if ((da > 0) == (db > 0)) {
        concordant += 1.0;
      } else {
        discordant += 1.0;
      }
    }
  }
  const double denom = std::sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b));
  if (denom == 0.0) return std::nullopt;
  return std::clamp((concordant - discordant) / denom, -1.0, 1.0);
}

inline double correlation(const std::vector<double>& a, const std::vector<double>& b, CorrelationMethod method) {
  if (a.size() != b.size()) throw Error(ErrorCode::kInput, "correlation needs equal-length inputs");
  if (a.size() < 2) throw Error(ErrorCode::kInput, "correlation needs at least two points");
  switch (method) {
    case CorrelationMethod::kPearson: return detail::pearson(a, b);
    case CorrelationMethod::kSpearman: return detail::pearson(detail::average_ranks(a), detail::average_ranks(b));
    case CorrelationMethod::kKendall: {
      auto tau = kendall_tau_b(a, b);
      if (!tau) throw Error(ErrorCode::kUndefinedCorrelation, "constant input");
      return *tau;
    }
  }
  return 0.0;
}

}  // namespace cfr
