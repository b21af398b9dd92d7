#pragma once

// The refinement state machine: an initial candidate from the base prompt,
// then up to K feedback-guided refinements, each verified by the classifier.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfr/attribution.hpp"
#include "cfr/core.hpp"
#include "cfr/errors.hpp"
#include "cfr/prompts.hpp"
#include "cfr/services.hpp"

namespace cfr {

enum class FeedbackKind { kNone, kConfidence, kAttribution, kNaturalLanguage };
enum class AttributionMethod { kLoo, kLime, kKernelShap, kExternal };
enum class FeedbackTarget { kCurrentCandidate, kOriginalInput };

constexpr std::string_view to_string(FeedbackKind k) {
  switch (k) {
    case FeedbackKind::kNone: return "none";
    case FeedbackKind::kConfidence: return "confidence";
    case FeedbackKind::kAttribution: return "attribution";
    case FeedbackKind::kNaturalLanguage: return "natural_language";
  }
  return "none";
}

inline FeedbackKind parse_feedback_kind(std::string_view s) {
  if (s == "none") return FeedbackKind::kNone;
  if (s == "confidence") return FeedbackKind::kConfidence;
  if (s == "attribution") return FeedbackKind::kAttribution;
  if (s == "natural_language" || s == "nl") return FeedbackKind::kNaturalLanguage;
  throw Error(ErrorCode::kConfig, "unknown feedback kind '" + std::string(s) + "'");
}

constexpr std::string_view to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::kLoo: return "loo";
    case AttributionMethod::kLime: return "lime";
    case AttributionMethod::kKernelShap: return "kernel_shap";
    case AttributionMethod::kExternal: return "external";
  }
  return "loo";
}

inline AttributionMethod parse_attribution_method(std::string_view s) {
  if (s == "loo") return AttributionMethod::kLoo;
  if (s == "lime") return AttributionMethod::kLime;
  if (s == "kernel_shap" || s == "shap") return AttributionMethod::kKernelShap;
  if (s == "external") return AttributionMethod::kExternal;
  throw Error(ErrorCode::kConfig, "unknown attribution method '" + std::string(s) + "'");
}

constexpr std::string_view to_string(FeedbackTarget t) {
  return t == FeedbackTarget::kCurrentCandidate ? "current_candidate" : "original_input";
}

inline FeedbackTarget parse_feedback_target(std::string_view s) {
  if (s == "current_candidate") return FeedbackTarget::kCurrentCandidate;
  if (s == "original_input") return FeedbackTarget::kOriginalInput;
  throw Error(ErrorCode::kConfig, "unknown feedback target '" + std::string(s) + "'");
}

struct LoopConfig {
  int max_iterations = 5;
  FeedbackKind feedback = FeedbackKind::kNone;
  WordSelection selection = WordSelection::kTop;
  std::optional<AttributionMethod> method;
  bool early_stop = true;
  FeedbackTarget feedback_target = FeedbackTarget::kCurrentCandidate;
  GenerationParams generation;
  // Overrides the per-method surrogate defaults (LIME, KernelSHAP).
  std::optional<SurrogateConfig> surrogate;
  std::string hint;

  void validate() const {
    if (max_iterations < 0) throw Error(ErrorCode::kConfig, "max_iterations must be >= 0");
    if (feedback == FeedbackKind::kAttribution && !method) {
      throw Error(ErrorCode::kConfig, "attribution feedback needs an attribution method");
    }
    generation.validate();
  }
};

struct LoopServices {
  const WindowedClassifier* classifier = nullptr;
  Generator* generator = nullptr;
  AttributionService* attributor = nullptr;  // only for the external method
  const PromptSet* prompts = nullptr;
};

// The text a feedback signal is computed on, with its prediction.
struct RoundState {
  TextFields fields;
  std::string edit_field;
  Prediction prediction;

  const std::string& text() const { return field_text(fields, edit_field); }
};

struct FeedbackOutcome {
  FeedbackSignal signal = NoFeedback{};
  std::vector<std::string> warnings;
  std::size_t generator_calls = 0;
  std::size_t classifier_calls = 0;
};

// Fields rendered into [INPUT_TEXT]: the bare text for single-field inputs,
// one "name: text" line per field otherwise.
inline std::string render_input_text(const TextFields& fields) {
  if (fields.size() == 1) return fields.front().second;
  std::string out;
  for (const auto& [name, text] : fields) {
    if (!out.empty()) out += '\n';
    out += name + ": " + text;
  }
  return out;
}

// Rendered highest score first, whatever the selection mode.
inline std::string join_feedback_words(std::vector<ScoredWord> words) {
  std::stable_sort(words.begin(), words.end(),
                   [](const ScoredWord& a, const ScoredWord& b) { return a.score > b.score; });
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ", ";
    out += w.word;
  }
  return out;
}

namespace detail {

inline GenerationParams call_params(const GenerationParams& base, std::uint64_t seed, std::size_t call_index) {
  GenerationParams p = base;
  p.seed = splitmix64(seed + call_index);
  return p;
}

inline SurrogateConfig surrogate_for(const LoopConfig& cfg, AttributionMethod method, std::size_t d,
                                     std::uint64_t seed) {
  SurrogateConfig s = cfg.surrogate.value_or(method == AttributionMethod::kLime
                                                 ? SurrogateConfig::lime_defaults()
                                                 : SurrogateConfig::kernel_shap_defaults());
  s.seed = seed;
  s.n_samples = std::max(s.n_samples, d + 2);
  return s;
}

}  // namespace detail

// `context` carries ORIGINAL_LABEL, TARGET_LABEL and INPUT_TEXT bindings.
inline FeedbackOutcome build_feedback(const LoopConfig& cfg, const RoundState& state, const LoopServices& services,
                                      const Bindings& context, std::uint64_t seed) {
  FeedbackOutcome out;
  switch (cfg.feedback) {
    case FeedbackKind::kNone:
      return out;

    case FeedbackKind::kConfidence:
      out.signal = ConfidenceFeedback{state.prediction.label,
                                      confidence_percent(state.prediction.prob(state.prediction.label))};
      return out;

    case FeedbackKind::kNaturalLanguage: {
      Bindings b = context;
      b["CF_TEXT"] = state.text();
      const std::string prompt = services.prompts->render(TemplateId::kNlFeedback, b);
      ++out.generator_calls;
      const std::string raw =
          services.generator->generate(prompt, detail::call_params(cfg.generation, seed, 0));
      out.signal = NaturalLanguageFeedback{extract_critique(raw)};
      return out;
    }

    case FeedbackKind::kAttribution: {
      const AttributionMethod method = *cfg.method;
      const Label& label = state.prediction.label;
      auto classify = [&](const std::string& text) {
        ++out.classifier_calls;
        return services.classifier->classify(with_field(state.fields, state.edit_field, text), true);
      };
      try {
        AttributionResult attr;
        const std::size_t d = tokenize_words(state.text()).size();
        switch (method) {
          case AttributionMethod::kLoo: attr = leave_one_out(state.text(), classify, label); break;
          case AttributionMethod::kLime:
            attr = lime_attribute(state.text(), classify, label,
                                  detail::surrogate_for(cfg, method, d, derive_seed(seed, "lime")));
            break;
          case AttributionMethod::kKernelShap:
            attr = kernel_shap(state.text(), classify, label,
                               detail::surrogate_for(cfg, method, d, derive_seed(seed, "kernel_shap")));
            break;
          case AttributionMethod::kExternal:
            if (!services.attributor) throw Error(ErrorCode::kConfig, "external attribution service not configured");
            attr = services.attributor->attribute(state.text(), label);
            break;
        }
        out.signal = AttributionFeedback{select_feedback_words(attr, cfg.selection, derive_seed(seed, "select")),
                                         cfg.selection, std::string(to_string(method))};
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kAlignment && e.code() != ErrorCode::kNumerical && e.code() != ErrorCode::kInput) {
          throw;
        }
        out.signal = NoFeedback{};
        out.warnings.push_back(std::string("attribution feedback dropped: ") + e.what());
      }
      return out;
    }
  }
  return out;
}

// Picks and renders the refinement prompt for `signal`. While the candidate
// still carries the original label, confidence and attribution feedback use
// the flip-seeking templates; otherwise the label-preserving ones.
inline std::string render_refinement(const PromptSet& prompts, const FeedbackSignal& signal, Bindings b,
                                     const Prediction& current, const Label& original_label) {
  const bool unflipped = current.label == original_label;
  if (const auto* conf = std::get_if<ConfidenceFeedback>(&signal)) {
    b["PRED_LABEL"] = conf->label;
    b["CONF"] = std::to_string(conf->percent);
    return prompts.render(unflipped ? TemplateId::kFlipConfidence : TemplateId::kRefineConfidence, b);
  }
  if (const auto* attr = std::get_if<AttributionFeedback>(&signal)) {
    b["PRED_LABEL"] = current.label;
    b["TOP_WORDS"] = join_feedback_words(attr->words);
    return prompts.render(unflipped ? TemplateId::kFlipAttribution : TemplateId::kRefineAttribution, b);
  }
  if (const auto* nl = std::get_if<NaturalLanguageFeedback>(&signal)) {
    b["FEEDBACK_TEXT"] = nl->critique;
    return prompts.render(TemplateId::kNlEdit, b);
  }
  return prompts.render(TemplateId::kRefinePlain, b);
}

inline Trace run_instance(const Instance& instance, const LoopConfig& cfg, const LoopServices& services,
                          std::uint64_t seed) {
  cfg.validate();
  if (!services.classifier || !services.generator || !services.prompts) {
    throw Error(ErrorCode::kConfig, "loop needs a classifier, a generator and prompts");
  }
  Trace trace;
  trace.instance = instance;
  trace.seed = seed;
  const LabelSpace& space = services.classifier->labels();

  auto classify = [&](const TextFields& fields) {
    ++trace.classifier_calls;
    return services.classifier->classify(fields);
  };
  auto generate = [&](const std::string& prompt) {
    const std::size_t index = trace.generator_calls++;
    return services.generator->generate(prompt, detail::call_params(cfg.generation, seed, index));
  };

  try {
    if (!find_field(instance.text_fields, instance.edit_field)) {
      throw Error(ErrorCode::kSchema, "edit field '" + instance.edit_field + "' missing");
    }
    trace.original_prediction = classify(instance.text_fields);
    trace.target_label = choose_target_label(trace.original_prediction.label, space, instance.target_label, seed);
    const Label& original_label = trace.original_prediction.label;

    Bindings context{{"ORIGINAL_LABEL", original_label},
                     {"TARGET_LABEL", trace.target_label},
                     {"INPUT_TEXT", render_input_text(instance.text_fields)},
                     {"HINT", cfg.hint}};

    std::string current_text = instance.edit_text();
    Prediction current_pred = trace.original_prediction;
    bool previously_valid = false;

    for (int k = 0; k <= cfg.max_iterations; ++k) {
      if (k > 0 && cfg.early_stop && previously_valid) break;
      CandidateRound round;
      round.k = k;
      std::string prompt;
      if (k == 0) {
        prompt = services.prompts->render(TemplateId::kBase, context);
      } else {
        RoundState state{cfg.feedback_target == FeedbackTarget::kCurrentCandidate
                             ? with_field(instance.text_fields, instance.edit_field, current_text)
                             : instance.text_fields,
                         instance.edit_field,
                         cfg.feedback_target == FeedbackTarget::kCurrentCandidate ? current_pred
                                                                                  : trace.original_prediction};
        const std::uint64_t round_seed = derive_seed(seed, "round:" + std::to_string(k));
        FeedbackOutcome fb = build_feedback(cfg, state, services, context, round_seed);
        trace.generator_calls += fb.generator_calls;
        trace.classifier_calls += fb.classifier_calls;
        round.feedback = std::move(fb.signal);
        round.warnings = std::move(fb.warnings);
        Bindings b = context;
        b["CF_TEXT"] = current_text;
        prompt = render_refinement(*services.prompts, round.feedback, std::move(b), current_pred, original_label);
      }

      const std::string raw = generate(prompt);
      if (auto cf = try_extract_cf(raw)) {
        round.candidate_text = std::move(*cf);
      } else {
        round.parse_failed = true;
        round.candidate_text = current_text;
      }
      round.prediction = classify(with_field(instance.text_fields, instance.edit_field, round.candidate_text));
      round.valid = round.prediction.label == trace.target_label;
      round.label_changed = round.prediction.label != original_label;
      round.transition = classify_transition(previously_valid, round.valid);

      current_text = round.candidate_text;
      current_pred = round.prediction;
      previously_valid = round.valid;
      trace.rounds.push_back(std::move(round));
    }
    trace.stopped_early = cfg.early_stop && !trace.rounds.empty() && trace.rounds.back().valid;
  } catch (const Error& e) {
    trace.status = TraceStatus::kAborted;
    trace.error = e.what();
  }
  return trace;
}

}  // namespace cfr
