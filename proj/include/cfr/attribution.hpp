#pragma once

// Black-box word attributions computed by deleting words and re-classifying.
//
// All methods share one perturbation model: a coalition keeps a subset of the
// words of the source text and is sent to the classifier as those words
// joined by single spaces. The full coalition is the untouched source text and
// the empty coalition is the empty string, whose prediction acts as the
// baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfr/core.hpp"
#include "cfr/errors.hpp"
#include "cfr/metrics.hpp"

namespace cfr {

template <typename F>
concept TextClassifierFn = requires(F f, const std::string& text) {
  { f(text) } -> std::convertible_to<Prediction>;
};

struct SurrogateConfig {
  std::size_t n_samples = 1000;
  std::optional<double> kernel_width;  // LIME only; defaults to 0.25 * sqrt(d)
  double ridge_lambda = 1e-3;
  std::uint64_t seed = 0;

  static SurrogateConfig lime_defaults(std::uint64_t seed = 0) { return {1000, std::nullopt, 1e-3, seed}; }
  static SurrogateConfig kernel_shap_defaults(std::uint64_t seed = 0) { return {2048, std::nullopt, 0.0, seed}; }

  void validate(std::size_t d) const {
    if (n_samples < d + 2) {
      throw Error(ErrorCode::kInput, "n_samples " + std::to_string(n_samples) + " must be >= d + 2 = " +
                                         std::to_string(d + 2));
    }
    if (kernel_width && !(*kernel_width > 0.0)) throw Error(ErrorCode::kInput, "kernel_width must be > 0");
    if (!(ridge_lambda >= 0.0)) throw Error(ErrorCode::kInput, "ridge_lambda must be >= 0");
  }
};

using Mask = std::vector<char>;

// Evaluates p(label | coalition text), memoizing repeated coalitions.
template <TextClassifierFn F>
class CoalitionValue {
 public:
  CoalitionValue(const std::string& text, F& classify, Label label, bool memoize = true)
      : text_(text), words_(word_strings(text)), classify_(classify), label_(std::move(label)), memoize_(memoize) {}

  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }
  std::size_t calls() const noexcept { return calls_; }

  std::string text_for(const Mask& keep) const {
    if (std::all_of(keep.begin(), keep.end(), [](char c) { return c != 0; })) return text_;
    std::string out;
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!keep[i]) continue;
      if (!out.empty()) out += ' ';
      out += words_[i];
    }
    return out;
  }

  double operator()(const Mask& keep) {
    std::string key;
    if (memoize_) {
      key.assign(keep.begin(), keep.end());
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    ++calls_;
    const Prediction p = classify_(text_for(keep));
    const double v = p.prob(label_);
    if (memoize_) cache_.emplace(std::move(key), v);
    return v;
  }

 private:
  const std::string& text_;
  std::vector<std::string> words_;
  F& classify_;
  Label label_;
  bool memoize_;
  std::size_t calls_ = 0;
  std::unordered_map<std::string, double> cache_;
};

namespace detail {

inline Mask all_ones(std::size_t d) { return Mask(d, 1); }

inline Mask mask_from_bits(std::uint64_t bits, std::size_t d) {
  Mask m(d);
  for (std::size_t i = 0; i < d; ++i) m[i] = static_cast<char>((bits >> i) & 1u);
  return m;
}

inline std::size_t popcount(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](char c) { return c != 0; }));
}

inline double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

// Minimizes sum_i w_i (y_i - x_i . beta)^2 + lambda * sum_{j penalized} beta_j^2
// by column-pivoted QR on the row-weighted, ridge-augmented design.
inline Eigen::VectorXd weighted_ridge(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                      double lambda, const std::vector<bool>& penalized) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  const Eigen::Index extra = lambda > 0.0 ? static_cast<Eigen::Index>(std::count(penalized.begin(), penalized.end(), true)) : 0;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + extra, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n + extra);
  const Eigen::VectorXd sw = w.cwiseSqrt();
  A.topRows(n) = sw.asDiagonal() * X;
  b.head(n) = sw.cwiseProduct(y);
  if (extra > 0) {
    Eigen::Index row = n;
    const double s = std::sqrt(lambda);
    for (Eigen::Index j = 0; j < p; ++j) {
      if (penalized[static_cast<std::size_t>(j)]) A(row++, j) = s;
    }
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < p) {
    throw Error(ErrorCode::kNumerical, "surrogate regression is rank deficient (rank " + std::to_string(qr.rank()) +
                                           " < " + std::to_string(p) + ")");
  }
  Eigen::VectorXd beta = qr.solve(b);
  if (!beta.allFinite()) throw Error(ErrorCode::kNumerical, "surrogate regression produced non-finite values");
  return beta;
}

inline AttributionResult make_result(std::vector<std::string> words, std::vector<double> scores, std::string method,
                                     Label label) {
  return {std::move(words), std::move(scores), std::move(method), std::move(label)};
}

}  // namespace detail

// score_i = p(label | x) - p(label | x without word i); exactly d + 1 calls.
template <TextClassifierFn F>
AttributionResult leave_one_out(const std::string& text, F&& classify, const Label& label) {
  CoalitionValue<std::remove_reference_t<F>> value(text, classify, label, /*memoize=*/false);
  const std::size_t d = value.size();
  if (d == 0) throw Error(ErrorCode::kInput, "cannot attribute an empty text");
  const double full = value(detail::all_ones(d));
  std::vector<double> scores(d);
  for (std::size_t i = 0; i < d; ++i) {
    Mask m = detail::all_ones(d);
    m[i] = 0;
    scores[i] = full - value(m);
  }
  return detail::make_result(value.words(), std::move(scores), "loo", label);
}

// LIME: uniform random masks (the first is all-ones), exponential kernel on
// the cosine distance to the all-ones mask, weighted ridge with an
// unpenalized intercept. Scores are the word coefficients.
template <TextClassifierFn F>
AttributionResult lime_attribute(const std::string& text, F&& classify, const Label& label,
                                 const SurrogateConfig& cfg) {
  CoalitionValue<std::remove_reference_t<F>> value(text, classify, label);
  const std::size_t d = value.size();
  if (d == 0) throw Error(ErrorCode::kInput, "cannot attribute an empty text");
  cfg.validate(d);
  const double width = cfg.kernel_width.value_or(0.25 * std::sqrt(static_cast<double>(d)));

  Rng rng(cfg.seed);
  const auto n = static_cast<Eigen::Index>(cfg.n_samples);
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(d) + 1);
  Eigen::VectorXd y(n);
  Eigen::VectorXd w(n);
  for (Eigen::Index s = 0; s < n; ++s) {
    Mask m = detail::all_ones(d);
    if (s > 0) {
      for (std::size_t i = 0; i < d; ++i) m[i] = static_cast<char>(rng() >> 63);
    }
    const std::size_t kept = detail::popcount(m);
    const double distance = kept == 0 ? 1.0 : 1.0 - std::sqrt(static_cast<double>(kept) / static_cast<double>(d));
    w(s) = std::exp(-(distance * distance) / (width * width));
    y(s) = value(m);
    X(s, 0) = 1.0;
    for (std::size_t i = 0; i < d; ++i) X(s, static_cast<Eigen::Index>(i) + 1) = m[i];
  }
  std::vector<bool> penalized(d + 1, true);
  penalized[0] = false;
  const Eigen::VectorXd beta = detail::weighted_ridge(X, y, w, cfg.ridge_lambda, penalized);
  std::vector<double> scores(d);
  for (std::size_t i = 0; i < d; ++i) scores[i] = beta(static_cast<Eigen::Index>(i) + 1);
  return detail::make_result(value.words(), std::move(scores), "lime", label);
}

// Shapley kernel weight for a coalition of size s out of d.
inline double shapley_kernel_weight(std::size_t d, std::size_t s) {
  return static_cast<double>(d - 1) /
         (detail::binomial(d, s) * static_cast<double>(s) * static_cast<double>(d - s));
}

// KernelSHAP with the efficiency constraint eliminated analytically: the last
// word's value is fixed to (v(full) - v(empty)) minus the others. Coalitions
// are fully enumerated when 2^d - 2 <= n_samples; otherwise sizes are drawn in
// proportion to their total kernel mass and rows carry unit weight.
template <TextClassifierFn F>
AttributionResult kernel_shap(const std::string& text, F&& classify, const Label& label,
                              const SurrogateConfig& cfg) {
  CoalitionValue<std::remove_reference_t<F>> value(text, classify, label);
  const std::size_t d = value.size();
  if (d == 0) throw Error(ErrorCode::kInput, "cannot attribute an empty text");
  cfg.validate(d);
  const double full = value(detail::all_ones(d));
  const double empty = value(Mask(d, 0));
  const double delta = full - empty;
  if (d == 1) return detail::make_result(value.words(), {delta}, "kernel_shap", label);

  std::vector<Mask> masks;
  std::vector<double> weights;
  const bool enumerate = d < 63 && ((std::uint64_t{1} << d) - 2) <= cfg.n_samples;
  if (enumerate) {
    const std::uint64_t limit = (std::uint64_t{1} << d) - 1;
    for (std::uint64_t bits = 1; bits < limit; ++bits) {
      masks.push_back(detail::mask_from_bits(bits, d));
      weights.push_back(shapley_kernel_weight(d, detail::popcount(masks.back())));
    }
  } else {
    std::vector<double> size_mass(d, 0.0);
    double total = 0.0;
    for (std::size_t s = 1; s < d; ++s) {
      size_mass[s] = static_cast<double>(d - 1) / (static_cast<double>(s) * static_cast<double>(d - s));
      total += size_mass[s];
    }
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(d);
    for (std::size_t draw = 0; draw < cfg.n_samples; ++draw) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
      std::size_t s = 1;
      double acc = size_mass[1];
      while (s + 1 < d && u >= acc) acc += size_mass[++s];
      std::iota(order.begin(), order.end(), 0);
      Mask m(d, 0);
      for (std::size_t i = 0; i < s; ++i) {
        std::swap(order[i], order[i + draw_index(rng, d - i)]);
        m[order[i]] = 1;
      }
      masks.push_back(std::move(m));
      weights.push_back(1.0);
    }
  }

  const auto rows = static_cast<Eigen::Index>(masks.size());
  const auto cols = static_cast<Eigen::Index>(d - 1);
  Eigen::MatrixXd X(rows, cols);
  Eigen::VectorXd y(rows);
  Eigen::VectorXd w(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Mask& m = masks[static_cast<std::size_t>(r)];
    const double last = m[d - 1];
    for (Eigen::Index j = 0; j < cols; ++j) X(r, j) = m[static_cast<std::size_t>(j)] - last;
    y(r) = value(m) - empty - last * delta;
    w(r) = weights[static_cast<std::size_t>(r)];
  }
  const Eigen::VectorXd phi = detail::weighted_ridge(X, y, w, cfg.ridge_lambda, std::vector<bool>(d - 1, true));
  std::vector<double> scores(d);
  double rest = 0.0;
  for (std::size_t i = 0; i + 1 < d; ++i) {
    scores[i] = phi(static_cast<Eigen::Index>(i));
    rest += scores[i];
  }
  scores[d - 1] = delta - rest;
  return detail::make_result(value.words(), std::move(scores), "kernel_shap", label);
}

inline constexpr std::size_t kExactShapleyMaxWords = 12;

// Brute-force Shapley values over all 2^d coalitions (d <= 12).
template <TextClassifierFn F>
AttributionResult exact_shapley(const std::string& text, F&& classify, const Label& label) {
  CoalitionValue<std::remove_reference_t<F>> value(text, classify, label);
  const std::size_t d = value.size();
  if (d == 0) throw Error(ErrorCode::kInput, "cannot attribute an empty text");
  if (d > kExactShapleyMaxWords) {
    throw Error(ErrorCode::kOracleCap, "exact Shapley is capped at " + std::to_string(kExactShapleyMaxWords) +
                                           " words, got " + std::to_string(d));
  }
  const std::uint64_t count = std::uint64_t{1} << d;
  std::vector<double> v(count);
  for (std::uint64_t bits = 0; bits < count; ++bits) v[bits] = value(detail::mask_from_bits(bits, d));

  std::vector<double> factorial(d + 1, 1.0);
  for (std::size_t i = 1; i <= d; ++i) factorial[i] = factorial[i - 1] * static_cast<double>(i);
  std::vector<double> scores(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const std::uint64_t bit = std::uint64_t{1} << i;
    for (std::uint64_t s = 0; s < count; ++s) {
      if (s & bit) continue;
      const auto size = static_cast<std::size_t>(__builtin_popcountll(s));
      const double weight = factorial[size] * factorial[d - size - 1] / factorial[d];
      scores[i] += weight * (v[s | bit] - v[s]);
    }
  }
  return detail::make_result(value.words(), std::move(scores), "exact_shapley", label);
}

// ---------------------------------------------------------------------------
// Feedback word selection

// k = max(10, floor(0.10 * d)), clipped to d.
constexpr std::size_t feedback_word_count(std::size_t d) { return std::min(d, std::max<std::size_t>(10, d / 10)); }

namespace detail {

// Word positions by descending score, ties by position.
inline std::vector<std::size_t> rank_descending(const std::vector<double>& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

inline std::vector<ScoredWord> select_feedback_words(const AttributionResult& attr, WordSelection mode,
                                                     std::uint64_t seed = 0) {
  if (attr.words.size() != attr.scores.size()) {
    throw Error(ErrorCode::kInput, "attribution words and scores differ in length");
  }
  const std::size_t d = attr.words.size();
  const std::size_t k = feedback_word_count(d);
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), 0);
  switch (mode) {
    case WordSelection::kTop:
      idx = detail::rank_descending(attr.scores);
      break;
    case WordSelection::kLeast:
      std::stable_sort(idx.begin(), idx.end(),
                       [&](std::size_t a, std::size_t b) { return attr.scores[a] < attr.scores[b]; });
      break;
    case WordSelection::kRandom: {
      Rng rng(seed);
      for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + draw_index(rng, d - i)]);
      break;
    }
  }
  std::vector<ScoredWord> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({attr.words[idx[i]], attr.scores[idx[i]], idx[i]});
  return out;
}

// ---------------------------------------------------------------------------
// Faithfulness

inline const std::vector<double> kDefaultAopcBins = {1.0, 5.0, 10.0, 20.0, 50.0};

struct FaithfulnessResult {
  double comprehensiveness = 0.0;
  double sufficiency = 0.0;
  // Undefined when either score list is constant.
  std::optional<double> tau_loo;
};

// Words kept per AOPC bin: floor(percent * d / 100), at least one, at most d.
inline std::size_t aopc_bin_size(double percent, std::size_t d) {
  const auto n = static_cast<std::size_t>(std::floor(percent * static_cast<double>(d) / 100.0));
  return std::clamp<std::size_t>(n, 1, d);
}

template <TextClassifierFn F>
FaithfulnessResult faithfulness(const std::string& text, const AttributionResult& attr, F&& classify,
                                const Label& label, const std::vector<double>& bins = kDefaultAopcBins) {
  CoalitionValue<std::remove_reference_t<F>> value(text, classify, label);
  const std::size_t d = value.size();
  if (attr.words != value.words() || attr.scores.size() != d) {
    throw Error(ErrorCode::kInput, "attribution is not aligned with the text");
  }
  if (d == 0 || bins.empty()) return {};
  const auto order = detail::rank_descending(attr.scores);
  const double full = value(detail::all_ones(d));
  double comp = 0.0;
  double suff = 0.0;
  for (double percent : bins) {
    const std::size_t n = aopc_bin_size(percent, d);
    Mask without = detail::all_ones(d);
    Mask only(d, 0);
    for (std::size_t i = 0; i < n; ++i) {
      without[order[i]] = 0;
      only[order[i]] = 1;
    }
    comp += full - value(without);
    suff += full - value(only);
  }
  FaithfulnessResult out;
  out.comprehensiveness = comp / static_cast<double>(bins.size());
  out.sufficiency = suff / static_cast<double>(bins.size());
  const auto loo = leave_one_out(text, classify, label);
  out.tau_loo = kendall_tau_b(attr.scores, loo.scores);
  return out;
}

}  // namespace cfr
