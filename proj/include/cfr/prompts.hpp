#pragma once

// Prompt templates with [PLACEHOLDER] markers, and parsers for the tagged
// fragments (<cf>, <think>, judge score tags) models are asked to emit.

#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cfr/errors.hpp"

namespace cfr {

enum class TemplateId {
  kBase,
  kRefineConfidence,
  kRefineAttribution,
  kNlFeedback,
  kNlEdit,
  kJudge,
  // Flip-seeking refinements, used while the candidate still carries the
  // original label.
  kFlipConfidence,
  kFlipAttribution,
  kRefinePlain,
};

inline constexpr std::array<TemplateId, 9> kAllTemplates = {
    TemplateId::kBase,           TemplateId::kRefineConfidence, TemplateId::kRefineAttribution,
    TemplateId::kNlFeedback,     TemplateId::kNlEdit,           TemplateId::kJudge,
    TemplateId::kFlipConfidence, TemplateId::kFlipAttribution,  TemplateId::kRefinePlain};

constexpr std::string_view to_string(TemplateId id) {
  switch (id) {
    case TemplateId::kBase: return "base";
    case TemplateId::kRefineConfidence: return "refine_confidence";
    case TemplateId::kRefineAttribution: return "refine_attribution";
    case TemplateId::kNlFeedback: return "nl_feedback";
    case TemplateId::kNlEdit: return "nl_edit";
    case TemplateId::kJudge: return "judge";
    case TemplateId::kFlipConfidence: return "flip_confidence";
    case TemplateId::kFlipAttribution: return "flip_attribution";
    case TemplateId::kRefinePlain: return "refine_plain";
  }
  return "base";
}

inline TemplateId parse_template_id(std::string_view s) {
  for (auto id : kAllTemplates) {
    if (to_string(id) == s) return id;
  }
  throw Error(ErrorCode::kConfig, "unknown prompt template '" + std::string(s) + "'");
}

namespace templates {

inline constexpr std::string_view kBase =
    R"(A classifier has determined that the label of the following text is [ORIGINAL_LABEL]. Please flip it to [TARGET_LABEL] with minimal changes. Wrap your answer in <cf>...</cf>.
Original input:
[INPUT_TEXT]
Hint: [HINT])";

inline constexpr std::string_view kRefineConfidence =
    R"(The classifier now predicts your text as [PRED_LABEL] ([CONF]%).
Your task is to minimize the edits compared to the original while preserving the current label: [PRED_LABEL].
Make the revision as close as possible to the original, but do not revert to the original label: [ORIGINAL_LABEL].
Wrap ONLY the final text in <cf>...</cf>.
Original input (classifier label [ORIGINAL_LABEL]):
[INPUT_TEXT]
Current counterfactual:
[CF_TEXT]
Hint: [HINT])";

inline constexpr std::string_view kRefineAttribution =
    R"(The classifier now predicts your text as [PRED_LABEL], which is the desired label.
Key words influencing this prediction: [TOP_WORDS].
Your task is to minimize the edits compared to the original while preserving the current label: [PRED_LABEL].
Make the revision as close as possible to the original, but do not revert to the original label: [ORIGINAL_LABEL].
Wrap ONLY the final text in <cf>...</cf>.
Original input (classifier label [ORIGINAL_LABEL]):
[INPUT_TEXT]
Current counterfactual:
[CF_TEXT]
Hint: [HINT])";

inline constexpr std::string_view kNlFeedback =
    R"(Analyze the current counterfactual and suggest improvements to achieve the target label [TARGET_LABEL].
You should make the smallest possible edits to the text while still achieving the target.
Wrap your reasoning inside <think>...</think>.

Original (classifier label [ORIGINAL_LABEL]):
[INPUT_TEXT]

Current counterfactual:
[CF_TEXT])";

inline constexpr std::string_view kNlEdit =
    R"(Based on the feedback below, revise the text so that it flips to  [TARGET_LABEL].

Feedback:
[FEEDBACK_TEXT]

Wrap ONLY the final counterfactual in <cf>...</cf>.

Original text (classifier label: [ORIGINAL_LABEL]):
[INPUT_TEXT]

Current counterfactual:
[CF_TEXT])";

inline constexpr std::string_view kJudge =
    "You are an evaluation model (LLM-as-a-judge). You will be given:\n"
    "- Original text\n"
    "- Counterfactual example (CFE): A minimally edited version of the input text that results in "
    "a change in the model\xE2\x80\x99s prediction. \n"
    "- Original prediction and counterfactual prediction\n"
    "- Whether the prediction flips (isFlip)\n"
    "\n"
    "Your task is to score the CFE scenario\xE2\x80\x99s explanatory quality on three metrics. Use "
    "integer scores from 1 to 6 (1 = lowest, 6 = highest).\n"
    "Metrics:\n"
    "1) Completeness (1-6): The explanation is sufficient in explaining the outcome.\n"
    "2) Overall satisfaction (1-6): This scenario effectively explains how to reach a different "
    "outcome.\n"
    "3) Feasibility (1-6): The actions suggested by the explanation are practical, realistic to "
    "implement and actionable.\n"
    "\n"
    "Output MUST be exactly in the following format (three tags, integers only):\n"
    "<completeness>score</completeness><satisfaction>score</satisfaction><feasibility>score</"
    "feasibility>\n"
    "\n"
    "Do not output anything else.\n"
    "\n"
    "Original text:\n"
    "[INPUT_TEXT]\n"
    "Counterfactual example (CFE):\n"
    "[CF_TEXT]\n"
    "Original prediction: [ORIGINAL_LABEL]\n"
    "Counterfactual prediction: [PRED_LABEL]\n"
    "isFlip: [IS_FLIP]";

inline constexpr std::string_view kFlipConfidence =
    R"(A classifier has determined that the label of the following text is [ORIGINAL_LABEL]. Please flip it to [TARGET_LABEL] with minimal changes. Wrap your answer in <cf>...</cf>.
The classifier still predicts your current counterfactual as [PRED_LABEL] ([CONF]%).
Original input:
[INPUT_TEXT]
Current counterfactual:
[CF_TEXT]
Hint: [HINT])";

inline constexpr std::string_view kFlipAttribution =
    R"(A classifier has determined that the label of the following text is [ORIGINAL_LABEL]. Please flip it to [TARGET_LABEL] with minimal changes. Wrap your answer in <cf>...</cf>.
The classifier still predicts your current counterfactual as [PRED_LABEL].
Key words influencing this prediction: [TOP_WORDS].
Original input:
[INPUT_TEXT]
Current counterfactual:
[CF_TEXT]
Hint: [HINT])";

inline constexpr std::string_view kRefinePlain =
    R"(A classifier has determined that the label of the following text is [ORIGINAL_LABEL]. Please flip it to [TARGET_LABEL] with minimal changes. Wrap your answer in <cf>...</cf>.
Original input:
[INPUT_TEXT]
Current counterfactual:
[CF_TEXT]
Hint: [HINT])";

constexpr std::string_view body(TemplateId id) {
  switch (id) {
    case TemplateId::kBase: return kBase;
    case TemplateId::kRefineConfidence: return kRefineConfidence;
    case TemplateId::kRefineAttribution: return kRefineAttribution;
    case TemplateId::kNlFeedback: return kNlFeedback;
    case TemplateId::kNlEdit: return kNlEdit;
    case TemplateId::kJudge: return kJudge;
    case TemplateId::kFlipConfidence: return kFlipConfidence;
    case TemplateId::kFlipAttribution: return kFlipAttribution;
    case TemplateId::kRefinePlain: return kRefinePlain;
  }
  return kBase;
}

}  // namespace templates

using Bindings = std::map<std::string, std::string>;

namespace detail {

// Visits the template, calling `on_text` for literal runs and
// `on_placeholder` for each [NAME] marker (NAME = [A-Z_]+).
template <typename OnText, typename OnPlaceholder>
void scan_template(std::string_view body, OnText&& on_text, OnPlaceholder&& on_placeholder) {
  std::size_t i = 0;
  std::size_t literal_start = 0;
  while (i < body.size()) {
    if (body[i] == '[') {
      std::size_t j = i + 1;
      while (j < body.size() && (std::isupper(static_cast<unsigned char>(body[j])) || body[j] == '_')) ++j;
      if (j > i + 1 && j < body.size() && body[j] == ']') {
        on_text(body.substr(literal_start, i - literal_start));
        on_placeholder(body.substr(i + 1, j - i - 1));
        i = j + 1;
        literal_start = i;
        continue;
      }
    }
    ++i;
  }
  on_text(body.substr(literal_start));
}

}  // namespace detail

struct PromptTemplate {
  TemplateId id = TemplateId::kBase;
  std::string body;

  std::vector<std::string> placeholders() const {
    std::vector<std::string> out;
    detail::scan_template(
        body, [](std::string_view) {},
        [&](std::string_view name) {
          for (const auto& seen : out) {
            if (seen == name) return;
          }
          out.emplace_back(name);
        });
    return out;
  }

  // Single pass: bound values are never rescanned for markers.
  std::string render(const Bindings& bindings) const {
    std::string out;
    out.reserve(body.size() + 256);
    detail::scan_template(
        body, [&](std::string_view text) { out += text; },
        [&](std::string_view name) {
          auto it = bindings.find(std::string(name));
          if (it == bindings.end()) {
            throw Error(ErrorCode::kRender, "template '" + std::string(to_string(id)) +
                                                "' needs a binding for [" + std::string(name) + "]");
          }
          out += it->second;
        });
    return out;
  }
};

// The active template set for a run: built-in defaults, optionally replaced
// per template from plain-text files.
class PromptSet {
 public:
  PromptSet() {
    for (auto id : kAllTemplates) templates_.emplace(id, PromptTemplate{id, std::string(templates::body(id))});
  }

  const PromptTemplate& get(TemplateId id) const { return templates_.at(id); }

  void set(TemplateId id, std::string body) { templates_[id] = PromptTemplate{id, std::move(body)}; }

  void load(TemplateId id, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::kConfig, "cannot read prompt template file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string body = ss.str();
    if (!body.empty() && body.back() == '\n') body.pop_back();
    if (!body.empty() && body.back() == '\r') body.pop_back();
    set(id, std::move(body));
  }

  std::string render(TemplateId id, const Bindings& bindings) const { return get(id).render(bindings); }

 private:
  std::map<TemplateId, PromptTemplate> templates_;
};

inline std::string render_prompt(TemplateId id, const Bindings& bindings) {
  return PromptTemplate{id, std::string(templates::body(id))}.render(bindings);
}

// ---------------------------------------------------------------------------
// Extraction

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Content of the last well-formed <tag>...</tag> pair (no nested open or
// close tag inside), or nullopt.
inline std::optional<std::string> last_tagged(std::string_view text, std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  std::size_t search_end = text.size();
  while (true) {
    if (search_end < close.size()) return std::nullopt;
    const std::size_t c = text.rfind(close, search_end - close.size());
    if (c == std::string_view::npos) return std::nullopt;
    const std::size_t o = c == 0 ? std::string_view::npos : text.rfind(open, c - 1);
    if (o != std::string_view::npos && o + open.size() <= c) {
      const std::string_view inner = text.substr(o + open.size(), c - o - open.size());
      if (inner.find(close) == std::string_view::npos) return std::string(inner);
    }
    // Orphan close tag: keep looking to the left of it.
    search_end = c;
  }
}

}  // namespace detail

// Returns the trimmed content of the last well-formed <cf>...</cf> pair.
// Throws a parse-failure error when there is none or it is blank.
inline std::string extract_cf(std::string_view generation) {
  auto inner = detail::last_tagged(generation, "cf");
  if (!inner) throw Error(ErrorCode::kParseFailure, "no well-formed <cf>...</cf> pair in generation");
  std::string out = detail::trim(*inner);
  if (out.empty()) throw Error(ErrorCode::kParseFailure, "empty <cf></cf> pair in generation");
  return out;
}

inline std::optional<std::string> try_extract_cf(std::string_view generation) {
  try {
    return extract_cf(generation);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParseFailure) return std::nullopt;
    throw;
  }
}

// Critique text: the last <think>...</think> body, or the whole completion
// when the tags are missing.
inline std::string extract_critique(std::string_view generation) {
  if (auto inner = detail::last_tagged(generation, "think")) return detail::trim(*inner);
  return detail::trim(generation);
}

struct JudgeScores {
  int completeness = 0;
  int satisfaction = 0;
  int feasibility = 0;

  friend bool operator==(const JudgeScores&, const JudgeScores&) = default;
};

inline JudgeScores extract_judge_scores(std::string_view text) {
  auto read = [&](std::string_view tag) {
    auto inner = detail::last_tagged(text, tag);
    if (!inner) throw Error(ErrorCode::kJudgeParse, "missing <" + std::string(tag) + "> tag");
    const std::string v = detail::trim(*inner);
    if (v.size() != 1 || v[0] < '1' || v[0] > '6') {
      throw Error(ErrorCode::kJudgeParse,
                  "<" + std::string(tag) + "> value '" + v + "' is not an integer in 1..6");
    }
    return v[0] - '0';
  };
  return {read("completeness"), read("satisfaction"), read("feasibility")};
}

}  // namespace cfr
