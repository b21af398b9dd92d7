#pragma once

// JSON encoding of traces and their parts. Field order is fixed (ordered_json)
// so equal traces always serialize to equal bytes.

#include <string>
#include <utility>
#include <variant>

#include <nlohmann/json.hpp>

#include "cfr/core.hpp"
#include "cfr/errors.hpp"

namespace cfr {

using Json = nlohmann::ordered_json;

namespace detail {

template <typename T>
T get_field(const Json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw Error(ErrorCode::kSchema, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("bad field '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline Json to_json(const Prediction& p) {
  Json probs = Json::object();
  for (const auto& [label, prob] : p.probs) probs[label] = prob;
  return Json{{"label", p.label}, {"probs", probs}};
}

inline Prediction prediction_from_json(const Json& j) {
  Prediction p;
  p.label = detail::get_field<std::string>(j, "label");
  const Json& probs = j.at("probs");
  for (auto it = probs.begin(); it != probs.end(); ++it) p.probs.emplace_back(it.key(), it.value().get<double>());
  return p;
}

inline Json to_json(const TextFields& fields) {
  Json j = Json::object();
  for (const auto& [name, text] : fields) j[name] = text;
  return j;
}

inline TextFields fields_from_json(const Json& j) {
  TextFields out;
  for (auto it = j.begin(); it != j.end(); ++it) out.emplace_back(it.key(), it.value().get<std::string>());
  return out;
}

inline Json to_json(const Instance& in) {
  Json j{{"id", in.id}, {"fields", to_json(in.text_fields)}, {"gold_label", in.gold_label}};
  if (in.target_label) j["target_label"] = *in.target_label;
  j["edit_field"] = in.edit_field;
  return j;
}

inline Instance instance_from_json(const Json& j) {
  Instance in;
  in.id = detail::get_field<std::string>(j, "id");
  in.text_fields = fields_from_json(j.at("fields"));
  in.gold_label = detail::get_field<std::string>(j, "gold_label");
  if (j.contains("target_label")) in.target_label = j.at("target_label").get<std::string>();
  in.edit_field = detail::get_field<std::string>(j, "edit_field");
  return in;
}

inline Json to_json(const FeedbackSignal& f) {
  return std::visit(
      [](const auto& v) -> Json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, NoFeedback>) {
          return Json{{"kind", "none"}};
        } else if constexpr (std::is_same_v<T, ConfidenceFeedback>) {
          return Json{{"kind", "confidence"}, {"label", v.label}, {"percent", v.percent}};
        } else if constexpr (std::is_same_v<T, AttributionFeedback>) {
          Json words = Json::array();
          for (const auto& w : v.words) {
            words.push_back(Json{{"word", w.word}, {"score", w.score}, {"position", w.position}});
          }
          return Json{{"kind", "attribution"},
                      {"mode", std::string(to_string(v.mode))},
                      {"method", v.method},
                      {"words", words}};
        } else {
          return Json{{"kind", "natural_language"}, {"critique", v.critique}};
        }
      },
      f);
}

inline FeedbackSignal feedback_from_json(const Json& j) {
  const auto kind = detail::get_field<std::string>(j, "kind");
  if (kind == "none") return NoFeedback{};
  if (kind == "confidence") {
    return ConfidenceFeedback{j.at("label").get<std::string>(), j.at("percent").get<int>()};
  }
  if (kind == "attribution") {
    AttributionFeedback a;
    a.mode = parse_word_selection(j.at("mode").get<std::string>());
    a.method = j.at("method").get<std::string>();
    for (const auto& w : j.at("words")) {
      a.words.push_back(
          ScoredWord{w.at("word").get<std::string>(), w.at("score").get<double>(), w.at("position").get<std::size_t>()});
    }
    return a;
  }
  if (kind == "natural_language") return NaturalLanguageFeedback{j.at("critique").get<std::string>()};
  throw Error(ErrorCode::kSchema, "unknown feedback kind '" + kind + "'");
}

inline Json to_json(const CandidateRound& r) {
  Json j{{"k", r.k},
         {"candidate", r.candidate_text},
         {"prediction", to_json(r.prediction)},
         {"feedback", to_json(r.feedback)},
         {"valid", r.valid},
         {"label_changed", r.label_changed},
         {"parse_failed", r.parse_failed},
         {"transition", std::string(to_string(r.transition))}};
  if (!r.warnings.empty()) j["warnings"] = r.warnings;
  return j;
}

inline CandidateRound round_from_json(const Json& j) {
  CandidateRound r;
  r.k = j.at("k").get<int>();
  r.candidate_text = j.at("candidate").get<std::string>();
  r.prediction = prediction_from_json(j.at("prediction"));
  r.feedback = feedback_from_json(j.at("feedback"));
  r.valid = j.at("valid").get<bool>();
  r.label_changed = j.at("label_changed").get<bool>();
  r.parse_failed = j.at("parse_failed").get<bool>();
  r.transition = parse_transition(j.at("transition").get<std::string>());
  if (j.contains("warnings")) r.warnings = j.at("warnings").get<std::vector<std::string>>();
  return r;
}

inline Json to_json(const Trace& t) {
  Json rounds = Json::array();
  for (const auto& r : t.rounds) rounds.push_back(to_json(r));
  Json j{{"instance", to_json(t.instance)},
         {"status", t.aborted() ? "aborted" : "ok"},
         {"original_prediction", to_json(t.original_prediction)},
         {"target_label", t.target_label},
         {"seed", t.seed},
         {"rounds", rounds},
         {"stopped_early", t.stopped_early},
         {"generator_calls", t.generator_calls},
         {"classifier_calls", t.classifier_calls}};
  if (!t.error.empty()) j["error"] = t.error;
  if (t.similarity) j["similarity"] = *t.similarity;
  if (t.perplexity) j["perplexity"] = *t.perplexity;
  return j;
}

inline Trace trace_from_json(const Json& j) {
  Trace t;
  t.instance = instance_from_json(j.at("instance"));
  t.status = j.at("status").get<std::string>() == "aborted" ? TraceStatus::kAborted : TraceStatus::kOk;
  if (j.at("original_prediction").contains("label") && !j.at("original_prediction").at("label").get<std::string>().empty()) {
    t.original_prediction = prediction_from_json(j.at("original_prediction"));
  }
  t.target_label = j.at("target_label").get<std::string>();
  t.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& r : j.at("rounds")) t.rounds.push_back(round_from_json(r));
  t.stopped_early = j.at("stopped_early").get<bool>();
  t.generator_calls = j.at("generator_calls").get<std::size_t>();
  t.classifier_calls = j.at("classifier_calls").get<std::size_t>();
  if (j.contains("error")) t.error = j.at("error").get<std::string>();
  if (j.contains("similarity")) t.similarity = j.at("similarity").get<double>();
  if (j.contains("perplexity")) t.perplexity = j.at("perplexity").get<double>();
  return t;
}

inline std::string dump_line(const Json& j) { return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace); }

}  // namespace cfr
