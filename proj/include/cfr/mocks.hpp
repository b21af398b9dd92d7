#pragma once

// In-process deterministic service implementations. They back the test and
// acceptance suites and can be selected from a run config for offline runs.

#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfr/core.hpp"
#include "cfr/services.hpp"

namespace cfr::mock {

// Lowercases ASCII and strips leading/trailing ASCII punctuation so that
// "Great!" and "great" hit the same lexicon entry.
inline std::string normalize_token(std::string_view word) {
  std::size_t b = 0;
  std::size_t e = word.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(word[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(word[e - 1]))) --e;
  std::string out(word.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::vector<std::string> normalized_tokens(const TextFields& fields) {
  std::vector<std::string> out;
  for (const auto& [name, text] : fields) {
    for (const auto& w : tokenize_words(text)) {
      auto t = normalize_token(w.text);
      if (!t.empty()) out.push_back(std::move(t));
    }
  }
  return out;
}

inline std::size_t word_count(const TextFields& fields) {
  std::size_t n = 0;
  for (const auto& [name, text] : fields) n += tokenize_words(text).size();
  return n;
}

// Class score s_l = bias_l + sum of weight[token][l] over tokens; probs are
// softmax(s) computed as exp(s_l - max s) / sum_j exp(s_j - max s), summing in
// label-space order.
class LexiconClassifier final : public Classifier {
 public:
  using Weights = std::map<std::string, std::map<Label, double>>;

  LexiconClassifier(LabelSpace labels, Weights weights, std::map<Label, double> bias = {})
      : Classifier(std::move(labels)), weights_(std::move(weights)), bias_(std::move(bias)) {
    for (const auto& [word, per_label] : weights_) {
      for (const auto& [label, w] : per_label) {
        if (!this->labels().contains(label)) {
          throw Error(ErrorCode::kConfig, "lexicon weight for unknown label '" + label + "'");
        }
      }
    }
  }

  std::vector<double> scores(const TextFields& fields) const {
    const auto& space = labels();
    std::vector<double> s(space.size(), 0.0);
    for (std::size_t i = 0; i < space.size(); ++i) {
      auto it = bias_.find(space[i]);
      if (it != bias_.end()) s[i] = it->second;
    }
    for (const auto& token : normalized_tokens(fields)) {
      auto it = weights_.find(token);
      if (it == weights_.end()) continue;
      for (std::size_t i = 0; i < space.size(); ++i) {
        auto jt = it->second.find(space[i]);
        if (jt != it->second.end()) s[i] += jt->second;
      }
    }
    return s;
  }

  std::string model_id() const override { return "mock-lexicon"; }

 protected:
  ClassifierOutput do_classify(const TextFields& fields) override {
    const auto s = scores(fields);
    double m = s[0];
    for (double x : s) m = std::max(m, x);
    std::vector<double> e(s.size());
    double z = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      e[i] = std::exp(s[i] - m);
      z += e[i];
    }
    for (double& x : e) x /= z;
    return {make_prediction(labels(), e), word_count(fields)};
  }

 private:
  Weights weights_;
  std::map<Label, double> bias_;
};

// Two-label classifier whose probability for `positive` is exactly
// intercept + sum of weight[token] over present tokens.
class LinearPresenceClassifier final : public Classifier {
 public:
  LinearPresenceClassifier(LabelSpace labels, Label positive, std::map<std::string, double> weights,
                           double intercept)
      : Classifier(std::move(labels)),
        positive_(std::move(positive)),
        weights_(std::move(weights)),
        intercept_(intercept) {
    if (this->labels().size() != 2 || !this->labels().contains(positive_)) {
      throw Error(ErrorCode::kConfig, "linear mock needs a two-label space containing the positive label");
    }
  }

  double positive_prob(const TextFields& fields) const {
    double p = intercept_;
    for (const auto& token : normalized_tokens(fields)) {
      auto it = weights_.find(token);
      if (it != weights_.end()) p += it->second;
    }
    return p;
  }

  std::string model_id() const override { return "mock-linear"; }

 protected:
  ClassifierOutput do_classify(const TextFields& fields) override {
    const double p = positive_prob(fields);
    std::vector<double> probs(2);
    const std::size_t pos = *labels().index_of(positive_);
    probs[pos] = p;
    probs[1 - pos] = 1.0 - p;
    return {make_prediction(labels(), probs), word_count(fields)};
  }

 private:
  Label positive_;
  std::map<std::string, double> weights_;
  double intercept_;
};

class FunctionClassifier final : public Classifier {
 public:
  using Fn = std::function<ClassifierOutput(const TextFields&)>;
  FunctionClassifier(LabelSpace labels, Fn fn, std::string id = "mock-function")
      : Classifier(std::move(labels)), fn_(std::move(fn)), id_(std::move(id)) {}
  std::string model_id() const override { return id_; }

 protected:
  ClassifierOutput do_classify(const TextFields& fields) override { return fn_(fields); }

 private:
  Fn fn_;
  std::string id_;
};

// ---------------------------------------------------------------------------
// Scripted generator

struct RewriteRule {
  std::string from;  // empty matches any text and replaces all of it
  std::string to;
  std::optional<int> round;     // fire only on this round
  std::optional<std::string> requires_text;  // fire only if the prompt contains this
  bool tagged = true;           // false emits an answer without <cf> tags
};

namespace detail {

inline std::string between(const std::string& s, const std::string& start_marker,
                           const std::vector<std::string>& end_markers) {
  auto b = s.find(start_marker);
  if (b == std::string::npos) return {};
  b += start_marker.size();
  std::size_t e = s.size();
  for (const auto& m : end_markers) {
    auto pos = s.find(m, b);
    if (pos != std::string::npos) e = std::min(e, pos);
  }
  std::string out = s.substr(b, e - b);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out;
}

}  // namespace detail

// Reads the text under edit from the prompt, applies the first matching rule
// and answers inside <cf> tags. Rounds are counted per original input: a base
// prompt resets the count to 0 and each edit prompt advances it. Critique
// prompts return `critique` wrapped in <think> tags without advancing.
class ScriptedGenerator final : public Generator {
 public:
  explicit ScriptedGenerator(std::vector<RewriteRule> rules, std::string critique = "",
                             std::optional<std::string> edit_field = std::nullopt)
      : rules_(std::move(rules)), critique_(std::move(critique)), edit_field_(std::move(edit_field)) {}

  std::string model_id() const override { return "mock-scripted"; }

 protected:
  std::string do_generate(const std::string& prompt, const GenerationParams&) override {
    if (prompt.rfind("Analyze the current counterfactual", 0) == 0) {
      return "<think>" + critique_ + "</think>";
    }
    const bool refinement = prompt.find("\nCurrent counterfactual:\n") != std::string::npos;
    const std::string input = original_block(prompt);
    const std::string text = refinement
                                 ? detail::between(prompt, "\nCurrent counterfactual:\n", {"\nHint:"})
                                 : select_field(input);
    int round = 0;
    {
      std::lock_guard lock(mu_);
      if (!refinement) {
        rounds_[input] = 0;
      } else {
        round = ++rounds_[input];
      }
    }
    for (const auto& rule : rules_) {
      if (rule.round && *rule.round != round) continue;
      if (rule.requires_text && prompt.find(*rule.requires_text) == std::string::npos) continue;
      if (!rule.from.empty() && text.find(rule.from) == std::string::npos) continue;
      std::string out = text;
      if (rule.from.empty()) {
        out = rule.to;
      } else {
        out.replace(out.find(rule.from), rule.from.size(), rule.to);
      }
      if (!rule.tagged) return "I am not able to produce a counterfactual for this input.";
      return "Here is the revised text.\n<cf>" + out + "</cf>";
    }
    return "<cf>" + text + "</cf>";
  }

 private:
  // Body under the "Original input..." / "Original text..." header line.
  static std::string original_block(const std::string& prompt) {
    auto pos = prompt.find("\nOriginal input");
    if (pos == std::string::npos) pos = prompt.find("\nOriginal text");
    if (pos == std::string::npos) return {};
    pos = prompt.find('\n', pos + 1);
    if (pos == std::string::npos) return {};
    return detail::between(prompt.substr(pos), "\n", {"\nCurrent counterfactual:", "\nHint:"});
  }

  std::string select_field(const std::string& block) const {
    if (!edit_field_) return block;
    const std::string marker = *edit_field_ + ": ";
    std::size_t pos = 0;
    while (pos <= block.size()) {
      const auto nl = block.find('\n', pos);
      const std::string line = block.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      if (line.rfind(marker, 0) == 0) return line.substr(marker.size());
      if (nl == std::string::npos) break;
      pos = nl + 1;
    }
    return block;
  }

  std::vector<RewriteRule> rules_;
  std::string critique_;
  std::optional<std::string> edit_field_;
  std::mutex mu_;
  std::map<std::string, int> rounds_;
};

class FunctionGenerator final : public Generator {
 public:
  using Fn = std::function<std::string(const std::string&)>;
  explicit FunctionGenerator(Fn fn, std::string id = "mock-function") : fn_(std::move(fn)), id_(std::move(id)) {}
  std::string model_id() const override { return id_; }

 protected:
  std::string do_generate(const std::string& prompt, const GenerationParams&) override { return fn_(prompt); }

 private:
  Fn fn_;
  std::string id_;
};

inline std::string judge_answer(int completeness, int satisfaction, int feasibility) {
  return "<completeness>" + std::to_string(completeness) + "</completeness><satisfaction>" +
         std::to_string(satisfaction) + "</satisfaction><feasibility>" + std::to_string(feasibility) +
         "</feasibility>";
}

class FixedJudge final : public Generator {
 public:
  FixedJudge(int completeness, int satisfaction, int feasibility)
      : answer_(judge_answer(completeness, satisfaction, feasibility)) {}
  std::string model_id() const override { return "mock-judge"; }

 protected:
  std::string do_generate(const std::string&, const GenerationParams&) override { return answer_; }

 private:
  std::string answer_;
};

// ---------------------------------------------------------------------------
// Embedder, scorer, attribution

// Bag-of-words count vector over hashed buckets; word order is irrelevant.
class HashEmbedder final : public Embedder {
 public:
  explicit HashEmbedder(std::size_t dimension = 64) : dimension_(dimension) {
    if (dimension_ == 0) throw Error(ErrorCode::kConfig, "embedding dimension must be positive");
  }
  std::string model_id() const override { return "mock-hash-bow"; }

 protected:
  std::vector<double> do_embed(const std::string& text) override {
    std::vector<double> v(dimension_, 0.0);
    for (const auto& token : normalized_tokens({{"text", text}})) {
      v[fnv1a64(token) % dimension_] += 1.0;
    }
    return v;
  }

 private:
  std::size_t dimension_;
};

class UnigramScorer final : public TokenScorer {
 public:
  explicit UnigramScorer(std::map<std::string, double> probs, double unknown_prob = 1e-6)
      : probs_(std::move(probs)), unknown_prob_(unknown_prob) {}
  std::string model_id() const override { return "mock-unigram"; }

 protected:
  ScoredTokens do_score(const std::string& text) override {
    ScoredTokens out;
    for (const auto& w : tokenize_words(text)) {
      std::string t = normalize_token(w.text);
      if (t.empty()) t = w.text;
      auto it = probs_.find(t);
      out.logprobs.push_back(std::log(it != probs_.end() ? it->second : unknown_prob_));
      out.tokens.push_back(std::move(t));
    }
    return out;
  }

 private:
  std::map<std::string, double> probs_;
  double unknown_prob_;
};

// Scores each word by its byte length.
class EchoLengthAttribution final : public AttributionService {
 public:
  std::string model_id() const override { return "mock-echo-length"; }

 protected:
  std::vector<AttributionSpan> do_attribute(const std::string& text, const Label&) override {
    std::vector<AttributionSpan> spans;
    for (const auto& w : tokenize_words(text)) spans.push_back({w.text, static_cast<double>(w.text.size())});
    return spans;
  }
};

class FunctionAttribution final : public AttributionService {
 public:
  using Fn = std::function<std::vector<AttributionSpan>(const std::string&, const Label&)>;
  explicit FunctionAttribution(Fn fn) : fn_(std::move(fn)) {}
  std::string model_id() const override { return "mock-function"; }

 protected:
  std::vector<AttributionSpan> do_attribute(const std::string& text, const Label& label) override {
    return fn_(text, label);
  }

 private:
  Fn fn_;
};

}  // namespace cfr::mock
