#pragma once

// Domain types shared by every module: labels, predictions, instances, the
// per-round refinement record and the word tokenizer used for attribution.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "cfr/errors.hpp"

namespace cfr {

using Label = std::string;

class LabelSpace {
 public:
  LabelSpace() = default;

  explicit LabelSpace(std::vector<Label> labels) : labels_(std::move(labels)) {
    if (labels_.size() < 2) {
      throw Error(ErrorCode::kConfig, "label space needs at least two labels");
    }
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i].empty()) throw Error(ErrorCode::kConfig, "empty label id");
      for (std::size_t j = 0; j < i; ++j) {
        if (labels_[i] == labels_[j]) {
          throw Error(ErrorCode::kConfig, "duplicate label '" + labels_[i] + "'");
        }
      }
    }
  }

  const std::vector<Label>& labels() const noexcept { return labels_; }
  std::size_t size() const noexcept { return labels_.size(); }
  const Label& operator[](std::size_t i) const { return labels_.at(i); }

  std::optional<std::size_t> index_of(std::string_view label) const {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] == label) return i;
    }
    return std::nullopt;
  }

  bool contains(std::string_view label) const { return index_of(label).has_value(); }

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;

 private:
  std::vector<Label> labels_;
};

inline constexpr double kProbabilitySumTolerance = 1e-6;

// Probabilities are stored in label-space order; `label` is the argmax with
// ties resolved toward the earlier label.
struct Prediction {
  Label label;
  std::vector<std::pair<Label, double>> probs;

  double prob(std::string_view l) const {
    for (const auto& [name, p] : probs) {
      if (name == l) return p;
    }
    return 0.0;
  }

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

inline Prediction make_prediction(const LabelSpace& space, const std::vector<double>& probs) {
  if (probs.size() != space.size()) {
    throw Error(ErrorCode::kProtocol, "probability vector size " + std::to_string(probs.size()) +
                                          " does not match label space size " +
                                          std::to_string(space.size()));
  }
  double sum = 0.0;
  std::size_t best = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) {
      throw Error(ErrorCode::kProtocol, "probability out of [0,1] for label '" + space[i] + "'");
    }
    sum += p;
    if (p > probs[best]) best = i;
  }
  if (std::abs(sum - 1.0) > kProbabilitySumTolerance) {
    throw Error(ErrorCode::kProtocol, "probabilities sum to " + std::to_string(sum));
  }
  Prediction out;
  out.label = space[best];
  out.probs.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out.probs.emplace_back(space[i], probs[i]);
  return out;
}

// Builds a prediction from (label, prob) pairs in any order. Labels missing
// from the pairs get probability 0; labels outside the space are rejected.
inline Prediction make_prediction(const LabelSpace& space,
                                  const std::vector<std::pair<Label, double>>& pairs) {
  std::vector<double> probs(space.size(), 0.0);
  std::vector<bool> seen(space.size(), false);
  for (const auto& [label, p] : pairs) {
    auto idx = space.index_of(label);
    if (!idx) throw Error(ErrorCode::kProtocol, "unknown label '" + label + "' in probabilities");
    if (seen[*idx]) throw Error(ErrorCode::kProtocol, "duplicate label '" + label + "'");
    seen[*idx] = true;
    probs[*idx] = p;
  }
  return make_prediction(space, probs);
}

// Ordered (field name, text) pairs. Single-text tasks use one entry; NLI uses
// premise then hypothesis.
using TextFields = std::vector<std::pair<std::string, std::string>>;

inline const std::string* find_field(const TextFields& fields, std::string_view name) {
  for (const auto& [key, text] : fields) {
    if (key == name) return &text;
  }
  return nullptr;
}

inline const std::string& field_text(const TextFields& fields, std::string_view name) {
  if (const auto* text = find_field(fields, name)) return *text;
  throw Error(ErrorCode::kSchema, "no text field named '" + std::string(name) + "'");
}

inline TextFields with_field(TextFields fields, std::string_view name, std::string text) {
  for (auto& [key, value] : fields) {
    if (key == name) {
      value = std::move(text);
      return fields;
    }
  }
  throw Error(ErrorCode::kSchema, "no text field named '" + std::string(name) + "'");
}

struct Instance {
  std::string id;
  TextFields text_fields;
  Label gold_label;
  std::optional<Label> target_label;
  std::string edit_field;

  const std::string& edit_text() const { return field_text(text_fields, edit_field); }

  friend bool operator==(const Instance&, const Instance&) = default;
};

// ---------------------------------------------------------------------------
// Feedback signals

enum class WordSelection { kTop, kLeast, kRandom };

constexpr std::string_view to_string(WordSelection mode) {
  switch (mode) {
    case WordSelection::kTop: return "top";
    case WordSelection::kLeast: return "least";
    case WordSelection::kRandom: return "random";
  }
  return "top";
}

inline WordSelection parse_word_selection(std::string_view s) {
  if (s == "top") return WordSelection::kTop;
  if (s == "least") return WordSelection::kLeast;
  if (s == "random") return WordSelection::kRandom;
  throw Error(ErrorCode::kConfig, "unknown word selection mode '" + std::string(s) + "'");
}

struct ScoredWord {
  std::string word;
  double score = 0.0;
  std::size_t position = 0;

  friend bool operator==(const ScoredWord&, const ScoredWord&) = default;
};

struct NoFeedback {
  friend bool operator==(const NoFeedback&, const NoFeedback&) = default;
};

struct ConfidenceFeedback {
  Label label;
  int percent = 0;
  friend bool operator==(const ConfidenceFeedback&, const ConfidenceFeedback&) = default;
};

struct AttributionFeedback {
  std::vector<ScoredWord> words;
  WordSelection mode = WordSelection::kTop;
  std::string method;
  friend bool operator==(const AttributionFeedback&, const AttributionFeedback&) = default;
};

struct NaturalLanguageFeedback {
  std::string critique;
  friend bool operator==(const NaturalLanguageFeedback&, const NaturalLanguageFeedback&) = default;
};

using FeedbackSignal =
    std::variant<NoFeedback, ConfidenceFeedback, AttributionFeedback, NaturalLanguageFeedback>;

// Integer percentage, rounded half-up.
inline int confidence_percent(double prob) {
  return static_cast<int>(std::floor(std::clamp(prob, 0.0, 1.0) * 100.0 + 0.5));
}

// Per-word importance for a (text, label) pair; `words` is always the
// tokenize_words split of the attributed text.
struct AttributionResult {
  std::vector<std::string> words;
  std::vector<double> scores;
  std::string method;
  Label label;

  friend bool operator==(const AttributionResult&, const AttributionResult&) = default;
};

// ---------------------------------------------------------------------------
// Round bookkeeping

enum class TransitionKind { kFailToFail, kFailToSuccess, kPreviousSuccess, kSuccessToFail };

inline constexpr TransitionKind kAllTransitions[] = {
    TransitionKind::kFailToFail, TransitionKind::kFailToSuccess,
    TransitionKind::kPreviousSuccess, TransitionKind::kSuccessToFail};

constexpr std::string_view to_string(TransitionKind kind) {
  switch (kind) {
    case TransitionKind::kFailToFail: return "fail_to_fail";
    case TransitionKind::kFailToSuccess: return "fail_to_success";
    case TransitionKind::kPreviousSuccess: return "previous_success";
    case TransitionKind::kSuccessToFail: return "success_to_fail";
  }
  return "fail_to_fail";
}

inline TransitionKind parse_transition(std::string_view s) {
  for (auto kind : kAllTransitions) {
    if (to_string(kind) == s) return kind;
  }
  throw Error(ErrorCode::kSchema, "unknown transition kind '" + std::string(s) + "'");
}

constexpr TransitionKind classify_transition(bool previously_valid, bool now_valid) {
  if (previously_valid) {
    return now_valid ? TransitionKind::kPreviousSuccess : TransitionKind::kSuccessToFail;
  }
  return now_valid ? TransitionKind::kFailToSuccess : TransitionKind::kFailToFail;
}

struct CandidateRound {
  int k = 0;
  std::string candidate_text;
  Prediction prediction;
  FeedbackSignal feedback = NoFeedback{};
  bool valid = false;
  // Any label change relative to the original prediction; validity only
  // counts a change to the target label.
  bool label_changed = false;
  bool parse_failed = false;
  TransitionKind transition = TransitionKind::kFailToFail;
  std::vector<std::string> warnings;

  friend bool operator==(const CandidateRound&, const CandidateRound&) = default;
};

enum class TraceStatus { kOk, kAborted };

struct Trace {
  Instance instance;
  Prediction original_prediction;
  Label target_label;
  std::vector<CandidateRound> rounds;
  bool stopped_early = false;
  std::size_t generator_calls = 0;
  std::size_t classifier_calls = 0;
  std::uint64_t seed = 0;
  TraceStatus status = TraceStatus::kOk;
  std::string error;
  // Filled by the batch runner for the final candidate.
  std::optional<double> similarity;
  std::optional<double> perplexity;

  bool aborted() const noexcept { return status == TraceStatus::kAborted; }
  const CandidateRound* final_round() const { return rounds.empty() ? nullptr : &rounds.back(); }

  // Index of the first valid round, if any.
  std::optional<int> first_valid_round() const {
    for (const auto& r : rounds) {
      if (r.valid) return r.k;
    }
    return std::nullopt;
  }

  friend bool operator==(const Trace&, const Trace&) = default;
};

// ---------------------------------------------------------------------------
// Word tokenization

struct Word {
  std::string text;
  std::size_t begin = 0;  // byte offsets into the source text
  std::size_t end = 0;

  friend bool operator==(const Word&, const Word&) = default;
};

namespace detail {

// Length of the UTF-8 whitespace sequence starting at `i`, or 0.
inline std::size_t whitespace_length(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  if (c == ' ' || (c >= 0x09 && c <= 0x0D)) return 1;
  auto byte = [&](std::size_t j) -> unsigned {
    return j < s.size() ? static_cast<unsigned char>(s[j]) : 0u;
  };
  if (c == 0xC2 && (byte(i + 1) == 0x85 || byte(i + 1) == 0xA0)) return 2;  // NEL, NBSP
  if (c == 0xE1 && byte(i + 1) == 0x9A && byte(i + 2) == 0x80) return 3;    // OGHAM SPACE
  if (c == 0xE2 && byte(i + 1) == 0x80) {
    const unsigned t = byte(i + 2);
    if ((t >= 0x80 && t <= 0x8A) || t == 0xA8 || t == 0xA9 || t == 0xAF) return 3;
  }
  if (c == 0xE2 && byte(i + 1) == 0x81 && byte(i + 2) == 0x9F) return 3;  // MMSP
  if (c == 0xE3 && byte(i + 1) == 0x80 && byte(i + 2) == 0x80) return 3;  // IDEOGRAPHIC
  return 0;
}

}  // namespace detail

// Splits on Unicode whitespace; punctuation stays attached to its word.
inline std::vector<Word> tokenize_words(std::string_view text) {
  std::vector<Word> words;
  std::size_t i = 0;
  constexpr std::size_t kNone = std::string_view::npos;
  std::size_t start = kNone;
  while (i < text.size()) {
    const std::size_t ws = detail::whitespace_length(text, i);
    if (ws > 0) {
      if (start != kNone) {
        words.push_back({std::string(text.substr(start, i - start)), start, i});
        start = kNone;
      }
      i += ws;
    } else {
      if (start == kNone) start = i;
      ++i;
    }
  }
  if (start != kNone) words.push_back({std::string(text.substr(start)), start, text.size()});
  return words;
}

inline std::vector<std::string> word_strings(std::string_view text) {
  std::vector<std::string> out;
  for (auto& w : tokenize_words(text)) out.push_back(std::move(w.text));
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Per-instance seed: stable across platforms and runs.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) {
  return splitmix64(seed ^ fnv1a64(key));
}

// mt19937_64 output is fixed by the standard; distributions are not, so
// indices are drawn with plain modulo reduction.
using Rng = std::mt19937_64;

inline std::size_t draw_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(n));
}

inline Label choose_target_label(const Label& predicted, const LabelSpace& space,
                                 const std::optional<Label>& override_label, std::uint64_t seed) {
  if (space.size() < 2) throw Error(ErrorCode::kConfig, "label space needs at least two labels");
  if (override_label) {
    if (!space.contains(*override_label)) {
      throw Error(ErrorCode::kInvalidTarget, "target '" + *override_label + "' not in label space");
    }
    if (*override_label == predicted) {
      throw Error(ErrorCode::kInvalidTarget,
                  "target label '" + *override_label + "' equals the current prediction");
    }
    return *override_label;
  }
  std::vector<Label> candidates;
  for (const auto& l : space.labels()) {
    if (l != predicted) candidates.push_back(l);
  }
  Rng rng(seed);
  return candidates[draw_index(rng, candidates.size())];
}

}  // namespace cfr
