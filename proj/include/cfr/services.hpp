#pragma once

// Client-side interfaces for the external model services. Each interface uses
// a non-virtual public entry point that counts calls and validates responses;
// implementations (mocks, HTTP clients) override the protected hook.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "cfr/core.hpp"
#include "cfr/errors.hpp"

namespace cfr {

struct GenerationParams {
  double temperature = 0.9;
  double top_p = 0.95;
  int top_k = 50;
  int max_new_tokens = 4096;
  std::optional<std::uint64_t> seed;

  void validate() const {
    if (!(temperature >= 0.0)) throw Error(ErrorCode::kConfig, "temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw Error(ErrorCode::kConfig, "top_p must be in (0,1]");
    if (top_k < 1) throw Error(ErrorCode::kConfig, "top_k must be >= 1");
    if (max_new_tokens < 1) throw Error(ErrorCode::kConfig, "max_new_tokens must be >= 1");
  }

  friend bool operator==(const GenerationParams&, const GenerationParams&) = default;
};

struct WindowConfig {
  std::size_t window_size = 512;
  std::size_t stride = 256;

  void validate() const {
    if (stride == 0 || stride > window_size) {
      throw Error(ErrorCode::kConfig, "window stride must satisfy 0 < stride <= window_size");
    }
  }
};

struct ScoredTokens {
  std::vector<std::string> tokens;
  std::vector<double> logprobs;
};

struct ClassifierOutput {
  Prediction prediction;
  // Service-side token count of the input, when the service reports one.
  std::optional<std::size_t> token_count;
};

class Classifier {
 public:
  explicit Classifier(LabelSpace labels) : labels_(std::move(labels)) {}
  virtual ~Classifier() = default;
  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;

  ClassifierOutput classify_once(const TextFields& fields) {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return do_classify(fields);
  }

  const LabelSpace& labels() const noexcept { return labels_; }
  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  virtual std::string model_id() const = 0;

 protected:
  virtual ClassifierOutput do_classify(const TextFields& fields) = 0;

 private:
  LabelSpace labels_;
  std::atomic<std::size_t> calls_{0};
};

class Generator {
 public:
  virtual ~Generator() = default;
  Generator() = default;
  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  std::string generate(const std::string& prompt, const GenerationParams& params) {
    if (max_prompt_chars_ && prompt.size() > *max_prompt_chars_) {
      throw Error(ErrorCode::kPromptTooLong, "prompt has " + std::to_string(prompt.size()) +
                                                 " bytes, limit is " +
                                                 std::to_string(*max_prompt_chars_));
    }
    calls_.fetch_add(1, std::memory_order_relaxed);
    return do_generate(prompt, params);
  }

  void set_max_prompt_chars(std::optional<std::size_t> limit) { max_prompt_chars_ = limit; }
  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  virtual std::string model_id() const = 0;

 protected:
  virtual std::string do_generate(const std::string& prompt, const GenerationParams& params) = 0;

 private:
  std::optional<std::size_t> max_prompt_chars_;
  std::atomic<std::size_t> calls_{0};
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  Embedder() = default;
  Embedder(const Embedder&) = delete;
  Embedder& operator=(const Embedder&) = delete;

  // Unit-L2 vector; the dimension is pinned by the first successful call.
  std::vector<double> embed(const std::string& text) {
    calls_.fetch_add(1, std::memory_order_relaxed);
    std::vector<double> v = do_embed(text);
    if (v.empty()) throw Error(ErrorCode::kProtocol, "embedding service returned an empty vector");
    double norm = 0.0;
    for (double x : v) {
      if (!std::isfinite(x)) throw Error(ErrorCode::kProtocol, "non-finite embedding component");
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) {
      throw Error(ErrorCode::kDegenerateEmbedding, "zero embedding vector cannot be normalized");
    }
    for (double& x : v) x /= norm;
    {
      std::lock_guard lock(mu_);
      if (!dimension_) {
        dimension_ = v.size();
      } else if (*dimension_ != v.size()) {
        throw Error(ErrorCode::kProtocol, "embedding dimension changed from " +
                                              std::to_string(*dimension_) + " to " +
                                              std::to_string(v.size()));
      }
    }
    return v;
  }

  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  virtual std::string model_id() const = 0;

 protected:
  virtual std::vector<double> do_embed(const std::string& text) = 0;

 private:
  std::atomic<std::size_t> calls_{0};
  std::mutex mu_;
  std::optional<std::size_t> dimension_;
};

class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  TokenScorer() = default;
  TokenScorer(const TokenScorer&) = delete;
  TokenScorer& operator=(const TokenScorer&) = delete;

  ScoredTokens score_tokens(const std::string& text) {
    if (tokenize_words(text).empty()) throw Error(ErrorCode::kInput, "cannot score empty text");
    calls_.fetch_add(1, std::memory_order_relaxed);
    ScoredTokens out = do_score(text);
    if (out.tokens.size() != out.logprobs.size()) {
      throw Error(ErrorCode::kProtocol, "scorer returned " + std::to_string(out.tokens.size()) +
                                            " tokens but " + std::to_string(out.logprobs.size()) +
                                            " logprobs");
    }
    for (double lp : out.logprobs) {
      if (!(lp <= 0.0)) throw Error(ErrorCode::kProtocol, "logprob must be <= 0");
    }
    return out;
  }

  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  virtual std::string model_id() const = 0;

 protected:
  virtual ScoredTokens do_score(const std::string& text) = 0;

 private:
  std::atomic<std::size_t> calls_{0};
};

struct AttributionSpan {
  std::string text;
  double score = 0.0;
};

namespace detail {

inline std::string strip_subword_markers(std::string piece) {
  auto starts_with = [&](std::string_view p) { return piece.rfind(p, 0) == 0; };
  if (starts_with("##")) piece.erase(0, 2);
  else if (starts_with("\xC4\xA0")) piece.erase(0, 2);      // byte-level BPE space marker
  else if (starts_with("\xE2\x96\x81")) piece.erase(0, 3);  // sentencepiece space marker
  std::string out;
  for (std::size_t i = 0; i < piece.size();) {
    const std::size_t ws = whitespace_length(piece, i);
    if (ws) {
      i += ws;
    } else {
      out += piece[i++];
    }
  }
  return out;
}

inline bool is_special_token(const std::string& piece) {
  static const char* const kSpecials[] = {"[CLS]", "[SEP]", "[PAD]", "<s>", "</s>", "<pad>",
                                          "<|endoftext|>"};
  for (const char* s : kSpecials) {
    if (piece == s) return true;
  }
  return false;
}

}  // namespace detail

// Realigns service spans (whole words or subword pieces) onto tokenize_words
// of `text`, summing scores of pieces that make up one word.
inline AttributionResult align_spans(const std::string& text, const std::vector<AttributionSpan>& spans,
                                     const Label& label, std::string method) {
  const auto words = tokenize_words(text);
  AttributionResult out;
  out.method = std::move(method);
  out.label = label;
  std::size_t w = 0;
  std::string buffer;
  double acc = 0.0;
  for (const auto& span : spans) {
    if (detail::is_special_token(span.text)) continue;
    const std::string piece = detail::strip_subword_markers(span.text);
    if (piece.empty()) continue;
    if (w >= words.size()) {
      throw Error(ErrorCode::kAlignment, "span '" + span.text + "' extends past the last word");
    }
    buffer += piece;
    acc += span.score;
    const std::string& target = words[w].text;
    if (buffer == target) {
      out.words.push_back(target);
      out.scores.push_back(acc);
      buffer.clear();
      acc = 0.0;
      ++w;
    } else if (target.compare(0, buffer.size(), buffer) != 0) {
      throw Error(ErrorCode::kAlignment,
                  "span '" + span.text + "' does not align with word '" + target + "'");
    }
  }
  if (w != words.size() || !buffer.empty()) {
    throw Error(ErrorCode::kAlignment, "spans cover " + std::to_string(w) + " of " +
                                           std::to_string(words.size()) + " words");
  }
  return out;
}

class AttributionService {
 public:
  virtual ~AttributionService() = default;
  AttributionService() = default;
  AttributionService(const AttributionService&) = delete;
  AttributionService& operator=(const AttributionService&) = delete;

  AttributionResult attribute(const std::string& text, const Label& label) {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return align_spans(text, do_attribute(text, label), label, "external");
  }

  std::size_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }
  virtual std::string model_id() const = 0;

 protected:
  virtual std::vector<AttributionSpan> do_attribute(const std::string& text, const Label& label) = 0;

 private:
  std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Sliding-window classification

struct Window {
  std::size_t begin = 0;  // word indices, half-open
  std::size_t end = 0;
};

inline std::vector<Window> make_windows(std::size_t n_words, std::size_t window, std::size_t stride) {
  std::vector<Window> out;
  if (n_words == 0) return out;
  for (std::size_t start = 0;; start += stride) {
    const std::size_t end = std::min(start + window, n_words);
    out.push_back({start, end});
    if (end == n_words) break;
  }
  return out;
}

// Majority vote over window predictions. Vote ties go to the higher mean
// probability, then to label-space order; probs are the renormalized mean.
inline Prediction aggregate_windows(const LabelSpace& space, const std::vector<Prediction>& preds) {
  if (preds.empty()) throw Error(ErrorCode::kInput, "no window predictions to aggregate");
  std::vector<std::size_t> votes(space.size(), 0);
  std::vector<double> mean(space.size(), 0.0);
  for (const auto& p : preds) {
    ++votes[*space.index_of(p.label)];
    for (std::size_t i = 0; i < space.size(); ++i) mean[i] += p.prob(space[i]);
  }
  double total = 0.0;
  for (double& m : mean) {
    m /= static_cast<double>(preds.size());
    total += m;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < space.size(); ++i) {
    if (votes[i] > votes[best] || (votes[i] == votes[best] && mean[i] > mean[best])) best = i;
  }
  Prediction out;
  out.label = space[best];
  for (std::size_t i = 0; i < space.size(); ++i) out.probs.emplace_back(space[i], mean[i] / total);
  return out;
}

// The classify operation used everywhere else: passes short inputs straight
// through and majority-votes overlapping windows of the longest field when
// the input exceeds the window.
class WindowedClassifier {
 public:
  WindowedClassifier(Classifier& inner, WindowConfig cfg) : inner_(&inner), cfg_(cfg) {
    cfg_.validate();
  }

  const LabelSpace& labels() const noexcept { return inner_->labels(); }
  Classifier& inner() const noexcept { return *inner_; }
  const WindowConfig& config() const noexcept { return cfg_; }

  // `allow_empty` admits perturbed inputs whose edited text is empty (the
  // attribution baseline); ordinary candidates must be non-empty.
  Prediction classify(const TextFields& fields, bool allow_empty = false) const {
    std::size_t total = 0;
    std::size_t longest = 0;
    std::vector<std::vector<std::string>> words;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      words.push_back(word_strings(fields[i].second));
      total += words.back().size();
      if (words[i].size() > words[longest].size()) longest = i;
    }
    if (total == 0 && !allow_empty) throw Error(ErrorCode::kInput, "cannot classify empty text");

    std::size_t window = cfg_.window_size;
    std::size_t stride = cfg_.stride;
    if (total <= window) {
      ClassifierOutput out = inner_->classify_once(fields);
      if (!out.token_count || *out.token_count <= window) return std::move(out.prediction);
      // The service counts more tokens than we count words: shrink the word
      // window by the observed ratio.
      const double ratio = static_cast<double>(total) / static_cast<double>(*out.token_count);
      window = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(window * ratio)));
      stride = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(stride * ratio)), 1,
                                       window);
      if (words[longest].size() <= window) return std::move(out.prediction);
    }

    std::vector<Prediction> preds;
    for (const auto& w : make_windows(words[longest].size(), window, stride)) {
      std::vector<std::string> slice(words[longest].begin() + static_cast<std::ptrdiff_t>(w.begin),
                                     words[longest].begin() + static_cast<std::ptrdiff_t>(w.end));
      TextFields part = fields;
      part[longest].second = join_words(slice);
      preds.push_back(inner_->classify_once(part).prediction);
    }
    return aggregate_windows(labels(), preds);
  }

 private:
  Classifier* inner_;
  WindowConfig cfg_;
};

}  // namespace cfr
