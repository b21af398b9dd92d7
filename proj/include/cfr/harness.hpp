#pragma once

// Batch orchestration and reports. Everything here reads or writes JSONL so
// reports can be recomputed offline from trace files.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cfr/attribution.hpp"
#include "cfr/core.hpp"
#include "cfr/errors.hpp"
#include "cfr/http.hpp"
#include "cfr/loop.hpp"
#include "cfr/metrics.hpp"
#include "cfr/mocks.hpp"
#include "cfr/prompts.hpp"
#include "cfr/serialization.hpp"
#include "cfr/services.hpp"

namespace cfr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

struct Schema {
  std::vector<std::string> fields{"text"};
  std::string edit_field = "text";
  std::string id_key = "id";
  std::string label_key = "label";
  std::string target_key = "target_label";
};

struct AblationArm {
  std::string name;
  LoopConfig loop;
};

struct HarnessConfig {
  LabelSpace labels;
  Schema schema;
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;
  double abort_threshold = 0.5;
  LoopConfig loop;
  WindowConfig window;
  bool ss_concatenated = false;  // embed all fields joined instead of the edited one
  Json services = Json::object();
  std::map<TemplateId, fs::path> prompt_files;
  std::vector<AblationArm> ablation;  // empty: the default grid
  std::vector<AttributionMethod> faithfulness_methods{AttributionMethod::kLoo, AttributionMethod::kLime,
                                                      AttributionMethod::kKernelShap};
  std::vector<double> aopc_bins = kDefaultAopcBins;
  fs::path base_dir = ".";
  Json snapshot = Json::object();  // the config as loaded, seed applied
};

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
T config_value(const Json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::kConfig, std::string("config field '") + key + "' has the wrong type");
  }
}

inline GenerationParams parse_generation(const Json& j) {
  GenerationParams p;
  p.temperature = config_value(j, "temperature", p.temperature);
  p.top_p = config_value(j, "top_p", p.top_p);
  p.top_k = config_value(j, "top_k", p.top_k);
  p.max_new_tokens = config_value(j, "max_new_tokens", p.max_new_tokens);
  return p;
}

}  // namespace detail

inline LoopConfig parse_loop_config(const Json& j, LoopConfig base = {}) {
  LoopConfig c = base;
  c.max_iterations = detail::config_value(j, "max_iterations", c.max_iterations);
  if (j.contains("feedback")) c.feedback = parse_feedback_kind(j.at("feedback").get<std::string>());
  if (j.contains("selection")) c.selection = parse_word_selection(j.at("selection").get<std::string>());
  if (j.contains("method")) c.method = parse_attribution_method(j.at("method").get<std::string>());
  c.early_stop = detail::config_value(j, "early_stop", c.early_stop);
  if (j.contains("feedback_target")) {
    c.feedback_target = parse_feedback_target(j.at("feedback_target").get<std::string>());
  }
  if (j.contains("generation")) c.generation = detail::parse_generation(j.at("generation"));
  if (j.contains("surrogate")) {
    const Json& s = j.at("surrogate");
    SurrogateConfig sc = c.surrogate.value_or(c.method == AttributionMethod::kLime
                                                  ? SurrogateConfig::lime_defaults()
                                                  : SurrogateConfig::kernel_shap_defaults());
    sc.n_samples = detail::config_value(s, "n_samples", sc.n_samples);
    if (s.contains("kernel_width")) sc.kernel_width = s.at("kernel_width").get<double>();
    sc.ridge_lambda = detail::config_value(s, "ridge_lambda", sc.ridge_lambda);
    c.surrogate = sc;
  }
  c.hint = detail::config_value(j, "hint", c.hint);
  c.validate();
  return c;
}

// Short stable name for a loop variant, used for ablation arms and reports.
inline std::string describe(const LoopConfig& c) {
  std::string name;
  switch (c.feedback) {
    case FeedbackKind::kNone: name = "none"; break;
    case FeedbackKind::kConfidence: name = "confidence"; break;
    case FeedbackKind::kNaturalLanguage: name = "natural_language"; break;
    case FeedbackKind::kAttribution:
      name = "attribution_" + std::string(to_string(c.selection)) + "_" + std::string(to_string(*c.method));
      break;
  }
  return name + (c.early_stop ? "" : "_no_early_stop");
}

// The default comparison grid: none, confidence, NL, and top/least/random
// attributed words per method, each with early stopping on and off.
inline std::vector<AblationArm> default_ablation_grid(const LoopConfig& base,
                                                      const std::vector<AttributionMethod>& methods) {
  std::vector<LoopConfig> variants;
  auto with = [&](FeedbackKind k) {
    LoopConfig c = base;
    c.feedback = k;
    return c;
  };
  variants.push_back(with(FeedbackKind::kNone));
  variants.push_back(with(FeedbackKind::kConfidence));
  variants.push_back(with(FeedbackKind::kNaturalLanguage));
  for (auto m : methods) {
    for (auto sel : {WordSelection::kTop, WordSelection::kLeast, WordSelection::kRandom}) {
      LoopConfig c = with(FeedbackKind::kAttribution);
      c.method = m;
      c.selection = sel;
      variants.push_back(c);
    }
  }
  std::vector<AblationArm> arms;
  for (bool es : {true, false}) {
    for (LoopConfig c : variants) {
      c.early_stop = es;
      arms.push_back({describe(c), c});
    }
  }
  return arms;
}

inline HarnessConfig parse_config(const Json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw Error(ErrorCode::kConfig, "config must be a JSON object");
  HarnessConfig c;
  c.base_dir = base_dir;
  try {
    c.labels = LabelSpace(detail::config_value<std::vector<std::string>>(j, "labels", {}));
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, std::string("labels: ") + e.what());
  }
  if (j.contains("schema")) {
    const Json& s = j.at("schema");
    c.schema.fields = detail::config_value(s, "fields", c.schema.fields);
    c.schema.edit_field = detail::config_value(s, "edit_field", c.schema.fields.back());
    c.schema.id_key = detail::config_value(s, "id_key", c.schema.id_key);
    c.schema.label_key = detail::config_value(s, "label_key", c.schema.label_key);
    c.schema.target_key = detail::config_value(s, "target_key", c.schema.target_key);
  }
  if (c.schema.fields.empty()) throw Error(ErrorCode::kConfig, "schema needs at least one field");
  if (std::find(c.schema.fields.begin(), c.schema.fields.end(), c.schema.edit_field) == c.schema.fields.end()) {
    throw Error(ErrorCode::kConfig, "edit_field '" + c.schema.edit_field + "' is not a schema field");
  }
  c.seed = detail::config_value<std::uint64_t>(j, "seed", 0);
  c.parallelism = std::max<std::size_t>(1, detail::config_value<std::size_t>(j, "parallelism", 1));
  c.abort_threshold = detail::config_value(j, "abort_threshold", 0.5);
  if (!(c.abort_threshold >= 0.0 && c.abort_threshold <= 1.0)) {
    throw Error(ErrorCode::kConfig, "abort_threshold must be in [0,1]");
  }
  try {
    LoopConfig base;
    base.hint = detail::config_value<std::string>(j, "hint", "");
    c.loop = j.contains("loop") ? parse_loop_config(j.at("loop"), base) : base;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfig) throw;
    throw Error(ErrorCode::kConfig, std::string("loop: ") + e.what());
  }
  if (j.contains("window")) {
    const Json& w = j.at("window");
    c.window.window_size = detail::config_value(w, "size", c.window.window_size);
    c.window.stride = detail::config_value(w, "stride", c.window.stride);
  }
  c.window.validate();
  if (j.contains("metrics")) {
    const auto mode = detail::config_value<std::string>(j.at("metrics"), "ss_embed", "edited_field");
    if (mode != "edited_field" && mode != "concatenated") {
      throw Error(ErrorCode::kConfig, "metrics.ss_embed must be edited_field or concatenated");
    }
    c.ss_concatenated = mode == "concatenated";
  }
  c.services = j.value("services", Json::object());
  if (j.contains("prompts")) {
    for (auto it = j.at("prompts").begin(); it != j.at("prompts").end(); ++it) {
      c.prompt_files[parse_template_id(it.key())] = detail::resolve(base_dir, it.value().get<std::string>());
    }
  }
  if (j.contains("faithfulness")) {
    const Json& f = j.at("faithfulness");
    if (f.contains("methods")) {
      c.faithfulness_methods.clear();
      for (const auto& m : f.at("methods")) c.faithfulness_methods.push_back(parse_attribution_method(m.get<std::string>()));
    }
    c.aopc_bins = detail::config_value(f, "bins", c.aopc_bins);
  }
  if (j.contains("ablation")) {
    const Json& a = j.at("ablation");
    if (a.contains("arms")) {
      for (const auto& arm : a.at("arms")) {
        LoopConfig lc = parse_loop_config(arm, c.loop);
        c.ablation.push_back({detail::config_value(arm, "name", describe(lc)), lc});
      }
    } else {
      std::vector<AttributionMethod> methods;
      for (const auto& m : a.value("methods", Json::array({"kernel_shap"}))) {
        methods.push_back(parse_attribution_method(m.get<std::string>()));
      }
      c.ablation = default_ablation_grid(c.loop, methods);
    }
  }
  c.snapshot = j;
  return c;
}

inline Json read_json_file(const fs::path& path, ErrorCode code) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(code, "cannot read '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(code, path.string() + ": " + e.what());
  }
}

inline HarnessConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  Json j = read_json_file(path, ErrorCode::kConfig);
  if (seed_override) j["seed"] = *seed_override;
  return parse_config(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

// ---------------------------------------------------------------------------
// Dataset

inline std::string id_string(const Json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw Error(ErrorCode::kSchema, "id must be a string or integer");
}

inline Instance parse_instance(const Json& rec, const Schema& schema, const LabelSpace& labels) {
  if (!rec.is_object()) throw Error(ErrorCode::kSchema, "record is not an object");
  Instance in;
  if (!rec.contains(schema.id_key)) throw Error(ErrorCode::kSchema, "missing '" + schema.id_key + "'");
  in.id = id_string(rec.at(schema.id_key));
  for (const auto& f : schema.fields) {
    if (!rec.contains(f) || !rec.at(f).is_string()) throw Error(ErrorCode::kSchema, "missing text field '" + f + "'");
    in.text_fields.emplace_back(f, rec.at(f).get<std::string>());
  }
  if (!rec.contains(schema.label_key) || !rec.at(schema.label_key).is_string()) {
    throw Error(ErrorCode::kSchema, "missing '" + schema.label_key + "'");
  }
  in.gold_label = rec.at(schema.label_key).get<std::string>();
  if (!labels.contains(in.gold_label)) throw Error(ErrorCode::kSchema, "unknown label '" + in.gold_label + "'");
  if (rec.contains(schema.target_key) && !rec.at(schema.target_key).is_null()) {
    in.target_label = rec.at(schema.target_key).get<std::string>();
    if (!labels.contains(*in.target_label)) {
      throw Error(ErrorCode::kSchema, "unknown target label '" + *in.target_label + "'");
    }
  }
  in.edit_field = schema.edit_field;
  return in;
}

template <typename Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read '" + path.string() + "'");
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kInput, path.string() + ":" + std::to_string(no) + ": malformed JSON: " + e.what());
    }
    try {
      fn(j);
    } catch (const Error& e) {
      throw Error(e.code(), path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

inline std::vector<Instance> load_dataset(const fs::path& path, const Schema& schema, const LabelSpace& labels) {
  std::vector<Instance> out;
  for_each_jsonl(path, [&](const Json& j) { out.push_back(parse_instance(j, schema, labels)); });
  return out;
}

inline std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::ostringstream hex;
  hex << "fnv1a64:" << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(ss.str());
  return hex.str();
}

// ---------------------------------------------------------------------------
// Services from config

struct ServiceBundle {
  std::unique_ptr<Classifier> classifier;
  std::unique_ptr<Generator> generator;
  std::unique_ptr<Embedder> embedder;
  std::unique_ptr<TokenScorer> scorer;
  std::unique_ptr<AttributionService> attribution;
  std::vector<std::pair<std::string, std::unique_ptr<Generator>>> judges;
  std::unique_ptr<WindowedClassifier> windowed;
  PromptSet prompts;

  LoopServices loop_services() const {
    return LoopServices{windowed.get(), generator.get(), attribution.get(), &prompts};
  }

  Json model_ids() const {
    Json j = Json::object();
    if (classifier) j["classifier"] = classifier->model_id();
    if (generator) j["generator"] = generator->model_id();
    if (embedder) j["embedder"] = embedder->model_id();
    if (scorer) j["scorer"] = scorer->model_id();
    if (attribution) j["attribution"] = attribution->model_id();
    return j;
  }
};

namespace detail {

// A judge that replays a list of score triples in call order.
class SequenceJudge final : public Generator {
 public:
  explicit SequenceJudge(std::vector<std::array<int, 3>> answers) : answers_(std::move(answers)) {
    if (answers_.empty()) throw Error(ErrorCode::kConfig, "sequence judge needs answers");
  }
  std::string model_id() const override { return "mock-sequence-judge"; }

 protected:
  std::string do_generate(const std::string&, const GenerationParams&) override {
    std::lock_guard lock(mu_);
    const auto& a = answers_[next_++ % answers_.size()];
    return mock::judge_answer(a[0], a[1], a[2]);
  }

 private:
  std::vector<std::array<int, 3>> answers_;
  std::size_t next_ = 0;
  std::mutex mu_;
};

inline http::EndpointConfig endpoint(const Json& j, const char* url_env) {
  http::EndpointConfig e;
  e.url = http::env_or(url_env, config_value<std::string>(j, "url", ""));
  e.token = http::env_or(http::kTokenEnv, config_value<std::string>(j, "token", ""));
  e.max_retries = config_value(j, "max_retries", e.max_retries);
  e.backoff = std::chrono::milliseconds(config_value<long long>(j, "backoff_ms", e.backoff.count()));
  e.max_in_flight = config_value(j, "max_in_flight", e.max_in_flight);
  e.timeout = std::chrono::seconds(config_value<long long>(j, "timeout_s", e.timeout.count()));
  if (e.url.empty()) throw Error(ErrorCode::kConfig, std::string("no URL configured and ") + url_env + " unset");
  return e;
}

inline std::vector<mock::RewriteRule> parse_rules(const Json& rules) {
  std::vector<mock::RewriteRule> out;
  for (const auto& r : rules) {
    mock::RewriteRule rule;
    rule.from = config_value<std::string>(r, "from", "");
    rule.to = config_value<std::string>(r, "to", "");
    if (r.contains("round")) rule.round = r.at("round").get<int>();
    if (r.contains("requires")) rule.requires_text = r.at("requires").get<std::string>();
    rule.tagged = config_value(r, "tagged", true);
    out.push_back(std::move(rule));
  }
  return out;
}

inline std::string kind_of(const Json& j) { return config_value<std::string>(j, "kind", ""); }

inline std::unique_ptr<Generator> make_judge(const Json& j) {
  const auto kind = kind_of(j);
  if (kind == "fixed") {
    const auto s = j.at("scores").get<std::array<int, 3>>();
    return std::make_unique<mock::FixedJudge>(s[0], s[1], s[2]);
  }
  if (kind == "sequence") return std::make_unique<SequenceJudge>(j.at("answers").get<std::vector<std::array<int, 3>>>());
  if (kind == "http") return std::make_unique<http::HttpGenerator>(endpoint(j, "CFR_JUDGE_URL"));
  throw Error(ErrorCode::kConfig, "unknown judge kind '" + kind + "'");
}

}  // namespace detail

inline ServiceBundle build_services(const HarnessConfig& cfg) {
  ServiceBundle b;
  const Json& s = cfg.services;
  try {
    if (s.contains("classifier")) {
      const Json& c = s.at("classifier");
      const auto kind = detail::kind_of(c);
      if (kind == "lexicon") {
        b.classifier = std::make_unique<mock::LexiconClassifier>(
            cfg.labels, c.at("weights").get<mock::LexiconClassifier::Weights>(),
            c.value("bias", std::map<Label, double>{}));
      } else if (kind == "http") {
        b.classifier = std::make_unique<http::HttpClassifier>(cfg.labels, detail::endpoint(c, "CFR_CLASSIFIER_URL"));
      } else {
        throw Error(ErrorCode::kConfig, "unknown classifier kind '" + kind + "'");
      }
      b.windowed = std::make_unique<WindowedClassifier>(*b.classifier, cfg.window);
    }
    if (s.contains("generator")) {
      const Json& g = s.at("generator");
      const auto kind = detail::kind_of(g);
      if (kind == "scripted") {
        std::optional<std::string> field;
        if (cfg.schema.fields.size() > 1) field = cfg.schema.edit_field;
        b.generator = std::make_unique<mock::ScriptedGenerator>(detail::parse_rules(g.value("rules", Json::array())),
                                                                g.value("critique", std::string()), field);
      } else if (kind == "http") {
        b.generator = std::make_unique<http::HttpGenerator>(detail::endpoint(g, "CFR_GENERATOR_URL"));
      } else {
        throw Error(ErrorCode::kConfig, "unknown generator kind '" + kind + "'");
      }
      if (g.contains("max_prompt_chars")) b.generator->set_max_prompt_chars(g.at("max_prompt_chars").get<std::size_t>());
    }
    if (s.contains("embedder")) {
      const Json& e = s.at("embedder");
      const auto kind = detail::kind_of(e);
      if (kind == "hash") {
        b.embedder = std::make_unique<mock::HashEmbedder>(e.value("dim", std::size_t{64}));
      } else if (kind == "http") {
        b.embedder = std::make_unique<http::HttpEmbedder>(detail::endpoint(e, "CFR_EMBEDDER_URL"));
      } else {
        throw Error(ErrorCode::kConfig, "unknown embedder kind '" + kind + "'");
      }
    }
    if (s.contains("scorer")) {
      const Json& t = s.at("scorer");
      const auto kind = detail::kind_of(t);
      if (kind == "unigram") {
        b.scorer = std::make_unique<mock::UnigramScorer>(t.value("probs", std::map<std::string, double>{}),
                                                         t.value("unk", 1e-6));
      } else if (kind == "http") {
        b.scorer = std::make_unique<http::HttpTokenScorer>(detail::endpoint(t, "CFR_SCORER_URL"));
      } else {
        throw Error(ErrorCode::kConfig, "unknown scorer kind '" + kind + "'");
      }
    }
    if (s.contains("attribution")) {
      const Json& a = s.at("attribution");
      const auto kind = detail::kind_of(a);
      if (kind == "echo_length") {
        b.attribution = std::make_unique<mock::EchoLengthAttribution>();
      } else if (kind == "http") {
        b.attribution = std::make_unique<http::HttpAttributionService>(detail::endpoint(a, "CFR_ATTRIBUTION_URL"));
      } else {
        throw Error(ErrorCode::kConfig, "unknown attribution kind '" + kind + "'");
      }
    }
    if (s.contains("judges")) {
      std::size_t i = 0;
      for (const auto& j : s.at("judges")) {
        b.judges.emplace_back(detail::config_value<std::string>(j, "name", "J" + std::to_string(++i)),
                              detail::make_judge(j));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("services: ") + e.what());
  }
  for (const auto& [id, path] : cfg.prompt_files) b.prompts.load(id, path.string());
  return b;
}

// ---------------------------------------------------------------------------
// Aggregate metrics (pure function of traces)

struct TransitionCounts {
  std::map<TransitionKind, std::size_t> counts;
  std::size_t& operator[](TransitionKind k) { return counts[k]; }
  std::size_t get(TransitionKind k) const {
    auto it = counts.find(k);
    return it == counts.end() ? 0 : it->second;
  }
};

struct RunMetrics {
  std::size_t n = 0;
  std::size_t aborted = 0;
  std::optional<double> lfr;
  std::optional<double> validity;
  std::optional<double> ss;
  std::optional<double> ppl;
  std::vector<double> pass_at_k;  // index 0 is pass@1
  // Per round k: transitions, with stopped traces carried as PreviousSuccess.
  std::vector<TransitionCounts> transitions;
  std::size_t generator_calls = 0;
  std::size_t classifier_calls = 0;
  std::size_t parse_failures = 0;
};

inline RunMetrics compute_metrics(const std::vector<Trace>& traces, int max_iterations) {
  RunMetrics m;
  m.n = traces.size();
  std::vector<Label> orig;
  std::vector<Label> fin;
  std::size_t valid = 0;
  double ss = 0.0;
  double ppl = 0.0;
  std::size_t n_ss = 0;
  std::size_t n_ppl = 0;
  int rounds_seen = max_iterations + 1;
  for (const auto& t : traces) {
    m.generator_calls += t.generator_calls;
    m.classifier_calls += t.classifier_calls;
    rounds_seen = std::max(rounds_seen, static_cast<int>(t.rounds.size()));
    for (const auto& r : t.rounds) m.parse_failures += r.parse_failed;
    if (t.aborted()) {
      ++m.aborted;
      continue;
    }
    if (t.rounds.empty()) continue;
    orig.push_back(t.original_prediction.label);
    fin.push_back(t.final_round()->prediction.label);
    valid += t.final_round()->valid;
    if (t.similarity) {
      ss += *t.similarity;
      ++n_ss;
    }
    if (t.perplexity) {
      ppl += *t.perplexity;
      ++n_ppl;
    }
  }
  if (!orig.empty()) {
    m.lfr = lfr(orig, fin);
    m.validity = static_cast<double>(valid) / static_cast<double>(orig.size());
  }
  if (n_ss) m.ss = ss / static_cast<double>(n_ss);
  if (n_ppl) m.ppl = ppl / static_cast<double>(n_ppl);
  for (int k = 1; k <= rounds_seen; ++k) m.pass_at_k.push_back(pass_at_k(traces, k));
  m.transitions.resize(static_cast<std::size_t>(rounds_seen));
  for (const auto& t : traces) {
    if (t.aborted()) continue;
    for (int k = 0; k < rounds_seen; ++k) {
      if (k < static_cast<int>(t.rounds.size())) {
        ++m.transitions[static_cast<std::size_t>(k)][t.rounds[static_cast<std::size_t>(k)].transition];
      } else if (!t.rounds.empty() && t.rounds.back().valid) {
        ++m.transitions[static_cast<std::size_t>(k)][TransitionKind::kPreviousSuccess];
      }
    }
  }
  return m;
}

inline Json to_json(const RunMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  Json pass = Json::object();
  for (std::size_t i = 0; i < m.pass_at_k.size(); ++i) pass[std::to_string(i + 1)] = m.pass_at_k[i];
  Json trans = Json::array();
  for (std::size_t k = 0; k < m.transitions.size(); ++k) {
    Json row{{"k", k}};
    for (auto kind : kAllTransitions) row[std::string(to_string(kind))] = m.transitions[k].get(kind);
    trans.push_back(row);
  }
  return Json{{"n", m.n},
              {"aborted", m.aborted},
              {"lfr", opt(m.lfr)},
              {"validity", opt(m.validity)},
              {"ss", opt(m.ss)},
              {"ppl", opt(m.ppl)},
              {"pass_at_k", pass},
              {"transitions", trans},
              {"generator_calls", m.generator_calls},
              {"classifier_calls", m.classifier_calls},
              {"parse_failures", m.parse_failures}};
}

inline std::string fixed(std::optional<double> v, int digits = 3) {
  if (!v) return "-";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << *v;
  return ss.str();
}

inline std::string format_report(const std::string& name, const RunMetrics& m) {
  std::ostringstream out;
  out << "run\t" << name << "\n";
  out << "n\t" << m.n << "\taborted\t" << m.aborted << "\n";
  out << "LFR\t" << fixed(m.lfr) << "\nvalidity\t" << fixed(m.validity) << "\nSS\t" << fixed(m.ss) << "\nPPL\t"
      << fixed(m.ppl, 2) << "\n";
  out << "pass@k";
  for (std::size_t k = 0; k < m.pass_at_k.size(); ++k) out << "\t" << (k + 1) << ":" << fixed(m.pass_at_k[k]);
  out << "\n\nk";
  for (auto kind : kAllTransitions) out << "\t" << to_string(kind);
  out << "\n";
  for (std::size_t k = 0; k < m.transitions.size(); ++k) {
    out << k;
    for (auto kind : kAllTransitions) out << "\t" << m.transitions[k].get(kind);
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Run directories

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

// Creates root/name, or root/name-1, root/name-2, ... if taken. Never reuses
// an existing directory.
inline fs::path create_run_dir(const fs::path& root, const std::string& name) {
  fs::create_directories(root);
  for (int i = 0;; ++i) {
    fs::path p = root / (i == 0 ? name : name + "-" + std::to_string(i));
    if (fs::create_directory(p)) return p;
  }
}

inline void write_file(const fs::path& path, const std::string& content) {
  if (fs::exists(path)) throw Error(ErrorCode::kIo, "refusing to overwrite '" + path.string() + "'");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << content;
}

inline std::vector<Trace> load_traces(const fs::path& path) {
  std::vector<Trace> out;
  for_each_jsonl(path, [&](const Json& j) { out.push_back(trace_from_json(j)); });
  return out;
}

inline fs::path traces_path(const fs::path& run_dir) { return run_dir / "traces.jsonl"; }

// ---------------------------------------------------------------------------
// Batch execution

struct RunResult {
  fs::path dir;
  RunMetrics metrics;
  bool over_threshold = false;
};

struct RunOptions {
  fs::path output_root = "runs";
  std::string name = "run";
  std::optional<fs::path> dataset_path;  // recorded in the manifest
};

namespace detail {

inline std::string embed_text(const TextFields& fields, const std::string& edit_field, bool concatenated) {
  return concatenated ? render_input_text(fields) : field_text(fields, edit_field);
}

// Similarity and perplexity of the final candidate.
inline void annotate_quality(Trace& t, const ServiceBundle& s, bool concatenated) {
  if (t.aborted() || t.rounds.empty()) return;
  const TextFields cf = with_field(t.instance.text_fields, t.instance.edit_field, t.final_round()->candidate_text);
  try {
    if (s.embedder) {
      t.similarity = cosine(s.embedder->embed(embed_text(t.instance.text_fields, t.instance.edit_field, concatenated)),
                            s.embedder->embed(embed_text(cf, t.instance.edit_field, concatenated)));
    }
    if (s.scorer) t.perplexity = perplexity(s.scorer->score_tokens(t.final_round()->candidate_text));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kTransport) {
      t.status = TraceStatus::kAborted;
      t.error = e.what();
    }
  }
}

}  // namespace detail

inline std::uint64_t instance_seed(std::uint64_t run_seed, const Instance& in) { return derive_seed(run_seed, in.id); }

inline RunResult run_batch(const std::vector<Instance>& dataset, const HarnessConfig& cfg, const LoopConfig& loop,
                           const ServiceBundle& services, const RunOptions& opts) {
  if (!services.windowed || !services.generator) {
    throw Error(ErrorCode::kConfig, "run needs a classifier and a generator");
  }
  loop.validate();
  RunResult result;
  result.dir = create_run_dir(opts.output_root, opts.name);
  const std::string started = utc_timestamp();
  const LoopServices ls = services.loop_services();

  const std::size_t n = dataset.size();
  const auto limit = static_cast<std::size_t>(std::floor(cfg.abort_threshold * static_cast<double>(n)));
  std::vector<std::optional<Trace>> traces(n);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> aborted{0};
  std::atomic<bool> halted{false};
  std::size_t workers_left = std::min(cfg.parallelism, std::max<std::size_t>(n, 1));

  std::ofstream out(traces_path(result.dir), std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write traces");

  auto worker = [&] {
    while (!halted.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      Trace t = run_instance(dataset[i], loop, ls, instance_seed(cfg.seed, dataset[i]));
      detail::annotate_quality(t, services, cfg.ss_concatenated);
      if (t.aborted() && aborted.fetch_add(1) + 1 > limit && n > 0) halted.store(true);
      {
        std::lock_guard lock(mu);
        traces[i] = std::move(t);
      }
      cv.notify_all();
    }
    {
      std::lock_guard lock(mu);
      --workers_left;
    }
    cv.notify_all();
  };

  std::vector<std::thread> pool;
  const std::size_t n_workers = workers_left;
  for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);

  // Single writer, in dataset order, so reruns give identical files.
  std::size_t written = 0;
  {
    std::unique_lock lock(mu);
    while (written < n) {
      cv.wait(lock, [&] { return traces[written].has_value() || workers_left == 0; });
      if (!traces[written]) {
        if (workers_left == 0) {
          // Halted: flush whatever finished after the gap.
          ++written;
          continue;
        }
        continue;
      }
      const std::string line = dump_line(to_json(*traces[written]));
      lock.unlock();
      out << line << '\n';
      lock.lock();
      ++written;
    }
  }
  for (auto& t : pool) t.join();
  out.close();

  std::vector<Trace> done;
  for (auto& t : traces) {
    if (t) done.push_back(std::move(*t));
  }
  result.metrics = compute_metrics(done, loop.max_iterations);
  result.metrics.n = n;
  result.over_threshold = halted.load() || result.metrics.aborted > limit;

  Json config = cfg.snapshot;
  config["seed"] = cfg.seed;
  config["loop_effective"] = Json{{"name", describe(loop)},
                                  {"max_iterations", loop.max_iterations},
                                  {"feedback", std::string(to_string(loop.feedback))},
                                  {"selection", std::string(to_string(loop.selection))},
                                  {"method", loop.method ? Json(std::string(to_string(*loop.method))) : Json(nullptr)},
                                  {"early_stop", loop.early_stop},
                                  {"feedback_target", std::string(to_string(loop.feedback_target))}};
  Json dataset_info{{"instances", n}};
  if (opts.dataset_path) {
    dataset_info["path"] = opts.dataset_path->string();
    dataset_info["digest"] = file_digest(*opts.dataset_path);
  }
  Json manifest{{"run_id", result.dir.filename().string()},
                {"status", result.over_threshold ? "failed" : "ok"},
                {"started_at", started},
                {"finished_at", utc_timestamp()},
                {"config", config},
                {"dataset", dataset_info},
                {"models", services.model_ids()},
                {"metrics", to_json(result.metrics)}};
  write_file(result.dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(result.dir / "metrics.json", to_json(result.metrics).dump(2) + "\n");
  return result;
}

inline Json load_manifest(const fs::path& run_dir) { return read_json_file(run_dir / "manifest.json", ErrorCode::kIo); }

inline std::pair<std::string, RunMetrics> report_run(const fs::path& run_dir) {
  const Json manifest = load_manifest(run_dir);
  const int k = manifest.at("config").at("loop_effective").at("max_iterations").get<int>();
  std::string name = manifest.at("config").at("loop_effective").at("name").get<std::string>();
  return {name, compute_metrics(load_traces(traces_path(run_dir)), k)};
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string arm;
  bool early_stop = true;
  fs::path dir;
  RunMetrics metrics;
  std::optional<double> d_lfr;
  std::optional<double> d_ss;
  std::optional<double> d_ppl;
};

inline std::optional<double> delta(std::optional<double> a, std::optional<double> b) {
  if (!a || !b) return std::nullopt;
  return *a - *b;
}

// Deltas are arm minus the no-feedback arm with the same early-stop setting.
inline void fill_deltas(std::vector<AblationRow>& rows) {
  for (auto& r : rows) {
    for (const auto& base : rows) {
      if (base.early_stop == r.early_stop && base.arm == (r.early_stop ? "none" : "none_no_early_stop")) {
        r.d_lfr = delta(r.metrics.lfr, base.metrics.lfr);
        r.d_ss = delta(r.metrics.ss, base.metrics.ss);
        r.d_ppl = delta(r.metrics.ppl, base.metrics.ppl);
      }
    }
  }
}

inline std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "arm\tearly_stop\tLFR\tdLFR\tSS\tdSS\tPPL\tdPPL\n";
  for (const auto& r : rows) {
    out << r.arm << '\t' << (r.early_stop ? "on" : "off") << '\t' << fixed(r.metrics.lfr) << '\t' << fixed(r.d_lfr)
        << '\t' << fixed(r.metrics.ss) << '\t' << fixed(r.d_ss) << '\t' << fixed(r.metrics.ppl, 2) << '\t'
        << fixed(r.d_ppl, 2) << '\n';
  }
  return out.str();
}

inline std::vector<AblationRow> ablation_suite(const std::vector<Instance>& dataset, const HarnessConfig& cfg,
                                               const ServiceBundle& services, const RunOptions& opts,
                                               fs::path* suite_dir = nullptr) {
  const auto arms = cfg.ablation.empty() ? default_ablation_grid(cfg.loop, {AttributionMethod::kKernelShap})
                                         : cfg.ablation;
  const fs::path dir = create_run_dir(opts.output_root, opts.name);
  std::vector<AblationRow> rows;
  for (const auto& arm : arms) {
    RunOptions o = opts;
    o.output_root = dir;
    o.name = arm.name;
    RunResult r = run_batch(dataset, cfg, arm.loop, services, o);
    rows.push_back({arm.name, arm.loop.early_stop, r.dir, r.metrics, {}, {}, {}});
  }
  fill_deltas(rows);
  Json j = Json::array();
  for (const auto& r : rows) {
    j.push_back(Json{{"arm", r.arm},
                     {"early_stop", r.early_stop},
                     {"run_dir", r.dir.filename().string()},
                     {"metrics", to_json(r.metrics)},
                     {"delta_lfr", r.d_lfr ? Json(*r.d_lfr) : Json(nullptr)},
                     {"delta_ss", r.d_ss ? Json(*r.d_ss) : Json(nullptr)},
                     {"delta_ppl", r.d_ppl ? Json(*r.d_ppl) : Json(nullptr)}});
  }
  write_file(dir / "ablation.json", j.dump(2) + "\n");
  write_file(dir / "ablation.tsv", format_ablation(rows));
  if (suite_dir) *suite_dir = dir;
  return rows;
}

// ---------------------------------------------------------------------------
// Counterfactual data augmentation

enum class CdaPolicy { kValidOnly, kAll };

inline CdaPolicy parse_cda_policy(std::string_view s) {
  if (s == "valid_only") return CdaPolicy::kValidOnly;
  if (s == "all") return CdaPolicy::kAll;
  throw Error(ErrorCode::kConfig, "unknown CDA policy '" + std::string(s) + "'");
}

// Writes flat records ({id, <fields>, label, provenance, ...}) loadable as a
// dataset. Counterfactual records carry the classifier's predicted label.
inline std::size_t emit_cda(const fs::path& run_dir, CdaPolicy policy, const fs::path& out_path) {
  if (fs::exists(out_path)) throw Error(ErrorCode::kIo, "refusing to overwrite '" + out_path.string() + "'");
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + out_path.string() + "'");
  std::size_t count = 0;
  auto emit = [&](const Json& j) {
    out << dump_line(j) << '\n';
    ++count;
  };
  for_each_jsonl(traces_path(run_dir), [&](const Json& line) {
    const Trace t = trace_from_json(line);
    Json orig{{"id", t.instance.id}};
    for (const auto& [name, text] : t.instance.text_fields) orig[name] = text;
    orig["label"] = t.instance.gold_label;
    orig["provenance"] = "original";
    emit(orig);
    if (t.aborted() || t.rounds.empty()) return;
    const CandidateRound& r = *t.final_round();
    if (policy == CdaPolicy::kValidOnly && !r.valid) return;
    Json cf{{"id", t.instance.id + "#cf"}};
    for (const auto& [name, text] : with_field(t.instance.text_fields, t.instance.edit_field, r.candidate_text)) {
      cf[name] = text;
    }
    cf["label"] = r.prediction.label;
    cf["provenance"] = "counterfactual";
    cf["source_round"] = r.k;
    cf["valid"] = r.valid;
    emit(cf);
  });
  return count;
}

// ---------------------------------------------------------------------------
// Scoring prediction files

struct ScoreResult {
  std::size_t n = 0;
  std::size_t correct = 0;
  double percent = 0.0;
  std::string formatted;  // two decimals
};

inline std::map<std::string, Label> read_labels(const fs::path& path, const std::vector<std::string>& keys) {
  std::map<std::string, Label> out;
  for_each_jsonl(path, [&](const Json& j) {
    if (!j.contains("id")) throw Error(ErrorCode::kSchema, "missing 'id'");
    const auto id = id_string(j.at("id"));
    for (const auto& k : keys) {
      if (j.contains(k) && j.at(k).is_string()) {
        if (!out.emplace(id, j.at(k).get<std::string>()).second) {
          throw Error(ErrorCode::kSchema, "duplicate id '" + id + "'");
        }
        return;
      }
    }
    throw Error(ErrorCode::kSchema, "record '" + id + "' has no label");
  });
  return out;
}

inline ScoreResult score_predictions(const fs::path& pred_file, const fs::path& gold_file) {
  const auto pred = read_labels(pred_file, {"prediction", "label"});
  const auto gold = read_labels(gold_file, {"label"});
  for (const auto& [id, _] : gold) {
    if (!pred.count(id)) throw Error(ErrorCode::kAlignment, "no prediction for id '" + id + "'");
  }
  for (const auto& [id, _] : pred) {
    if (!gold.count(id)) throw Error(ErrorCode::kAlignment, "prediction for unknown id '" + id + "'");
  }
  if (gold.empty()) throw Error(ErrorCode::kInput, "no records to score");
  ScoreResult r;
  r.n = gold.size();
  for (const auto& [id, label] : gold) r.correct += pred.at(id) == label;
  r.percent = 100.0 * static_cast<double>(r.correct) / static_cast<double>(r.n);
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(2) << r.percent;
  r.formatted = ss.str();
  return r;
}

// ---------------------------------------------------------------------------
// LLM-as-a-judge

inline constexpr std::array<const char*, 3> kJudgeCriteria = {"completeness", "satisfaction", "feasibility"};

struct JudgeRow {
  std::string method;
  std::string judge;
  std::size_t rated = 0;
  std::size_t parse_errors = 0;
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
};

struct JudgeReport {
  std::vector<JudgeRow> rows;
  // Per method, per criterion.
  std::map<std::string, std::array<std::optional<double>, 3>> inter_judge_alpha;
  // Per method, per judge, per criterion: alpha over humans plus that judge.
  std::map<std::string, std::map<std::string, std::array<std::optional<double>, 3>>> judge_human_alpha;
  std::map<std::string, std::array<std::optional<double>, 3>> human_alpha;
};

// Human ratings: JSONL {id, rater, completeness, satisfaction, feasibility}.
using HumanRatings = std::map<std::string, std::map<std::string, std::array<int, 3>>>;  // id -> rater -> scores

inline HumanRatings load_human_ratings(const fs::path& path) {
  HumanRatings out;
  for_each_jsonl(path, [&](const Json& j) {
    std::array<int, 3> s{};
    for (std::size_t c = 0; c < 3; ++c) s[c] = j.at(kJudgeCriteria[c]).get<int>();
    out[id_string(j.at("id"))][j.at("rater").get<std::string>()] = s;
  });
  return out;
}

namespace detail {

inline std::optional<double> try_alpha(const RatingsMatrix& m) {
  try {
    return krippendorff_alpha(m, MetricLevel::kOrdinal);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kUndefinedAgreement) return std::nullopt;
    throw;
  }
}

inline Bindings judge_bindings(const Trace& t) {
  const CandidateRound& r = *t.final_round();
  return Bindings{{"INPUT_TEXT", render_input_text(t.instance.text_fields)},
                  {"CF_TEXT", r.candidate_text},
                  {"ORIGINAL_LABEL", t.original_prediction.label},
                  {"PRED_LABEL", r.prediction.label},
                  {"IS_FLIP", r.label_changed ? "true" : "false"}};
}

}  // namespace detail

inline JudgeReport judge_run(const std::vector<fs::path>& run_dirs,
                             const std::vector<std::pair<std::string, Generator*>>& judges, const PromptSet& prompts,
                             const GenerationParams& params, const std::optional<HumanRatings>& humans = std::nullopt) {
  if (judges.empty()) throw Error(ErrorCode::kConfig, "no judges configured");
  JudgeReport report;
  for (const auto& dir : run_dirs) {
    const std::string method = report_run(dir).first;
    std::vector<Trace> items;
    for (auto& t : load_traces(traces_path(dir))) {
      if (!t.aborted() && !t.rounds.empty()) items.push_back(std::move(t));
    }
    // scores[judge][item][criterion]
    std::vector<std::vector<std::optional<std::array<int, 3>>>> scores(judges.size());
    for (std::size_t j = 0; j < judges.size(); ++j) {
      JudgeRow row{method, judges[j].first, 0, 0, {}, {}};
      std::array<std::vector<double>, 3> values;
      for (const auto& t : items) {
        const std::string prompt = prompts.render(TemplateId::kJudge, detail::judge_bindings(t));
        try {
          const JudgeScores s = extract_judge_scores(judges[j].second->generate(prompt, params));
          const std::array<int, 3> a{s.completeness, s.satisfaction, s.feasibility};
          scores[j].push_back(a);
          for (std::size_t c = 0; c < 3; ++c) values[c].push_back(a[c]);
          ++row.rated;
        } catch (const Error& e) {
          if (e.code() != ErrorCode::kJudgeParse) throw;
          scores[j].push_back(std::nullopt);
          ++row.parse_errors;
        }
      }
      for (std::size_t c = 0; c < 3; ++c) {
        const auto& v = values[c];
        if (v.empty()) continue;
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        row.mean[c] = mean;
        row.stddev[c] = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
      }
      report.rows.push_back(row);
    }

    auto matrix = [&](std::size_t c, const std::vector<std::string>& human_raters, std::optional<std::size_t> judge,
                      bool all_judges) {
      RatingsMatrix m;
      m.raters = human_raters;
      if (all_judges) {
        for (const auto& [name, _] : judges) m.raters.push_back(name);
      } else if (judge) {
        m.raters.push_back(judges[*judge].first);
      }
      for (std::size_t i = 0; i < items.size(); ++i) {
        m.items.push_back(items[i].instance.id);
        std::vector<std::optional<int>> row;
        for (const auto& h : human_raters) {
          std::optional<int> v;
          if (humans) {
            auto it = humans->find(items[i].instance.id);
            if (it != humans->end()) {
              auto jt = it->second.find(h);
              if (jt != it->second.end()) v = jt->second[c];
            }
          }
          row.push_back(v);
        }
        auto push_judge = [&](std::size_t j) {
          row.push_back(scores[j][i] ? std::optional<int>((*scores[j][i])[c]) : std::nullopt);
        };
        if (all_judges) {
          for (std::size_t j = 0; j < judges.size(); ++j) push_judge(j);
        } else if (judge) {
          push_judge(*judge);
        }
        m.values.push_back(std::move(row));
      }
      return m;
    };

    for (std::size_t c = 0; c < 3; ++c) {
      if (judges.size() >= 2) report.inter_judge_alpha[method][c] = detail::try_alpha(matrix(c, {}, std::nullopt, true));
    }
    if (humans) {
      std::vector<std::string> raters;
      for (const auto& [id, per] : *humans) {
        for (const auto& [r, _] : per) {
          if (std::find(raters.begin(), raters.end(), r) == raters.end()) raters.push_back(r);
        }
      }
      std::sort(raters.begin(), raters.end());
      for (std::size_t c = 0; c < 3; ++c) {
        if (raters.size() >= 2) report.human_alpha[method][c] = detail::try_alpha(matrix(c, raters, std::nullopt, false));
        for (std::size_t j = 0; j < judges.size(); ++j) {
          if (!raters.empty()) {
            report.judge_human_alpha[method][judges[j].first][c] = detail::try_alpha(matrix(c, raters, j, false));
          }
        }
      }
    }
  }
  return report;
}

inline std::string format_judge_report(const JudgeReport& r) {
  std::ostringstream out;
  out << "method\tjudge\trated\tparse_errors\tcompleteness\tsatisfaction\tfeasibility\n";
  for (const auto& row : r.rows) {
    out << row.method << '\t' << row.judge << '\t' << row.rated << '\t' << row.parse_errors;
    for (std::size_t c = 0; c < 3; ++c) {
      out << '\t' << fixed(row.mean[c], 2) << " \xC2\xB1 " << fixed(row.stddev[c], 2);
    }
    out << '\n';
  }
  auto alpha_line = [&](const std::string& label, const std::array<std::optional<double>, 3>& a) {
    out << label;
    for (const auto& v : a) out << '\t' << fixed(v);
    out << '\n';
  };
  if (!r.inter_judge_alpha.empty() || !r.human_alpha.empty()) {
    out << "\nalpha\tcompleteness\tsatisfaction\tfeasibility\n";
  }
  for (const auto& [method, a] : r.inter_judge_alpha) alpha_line(method + " judges", a);
  for (const auto& [method, a] : r.human_alpha) alpha_line(method + " humans", a);
  for (const auto& [method, per] : r.judge_human_alpha) {
    for (const auto& [judge, a] : per) alpha_line(method + " humans+" + judge, a);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Faithfulness over a dataset

struct FaithfulnessRow {
  std::string method;
  std::size_t n = 0;
  double comprehensiveness = 0.0;
  double sufficiency = 0.0;
  std::optional<double> tau_loo;  // mean over instances where defined
  std::size_t tau_defined = 0;
};

inline std::vector<FaithfulnessRow> faithfulness_report(const std::vector<Instance>& dataset,
                                                        const HarnessConfig& cfg, const ServiceBundle& services) {
  if (!services.windowed) throw Error(ErrorCode::kConfig, "faithfulness needs a classifier");
  std::vector<FaithfulnessRow> rows;
  for (auto method : cfg.faithfulness_methods) {
    FaithfulnessRow row;
    row.method = std::string(to_string(method));
    double tau_sum = 0.0;
    for (const auto& in : dataset) {
      auto classify = [&](const std::string& text) {
        return services.windowed->classify(with_field(in.text_fields, in.edit_field, text), true);
      };
      const std::string& text = in.edit_text();
      const Label label = classify(text).label;
      const std::size_t d = tokenize_words(text).size();
      if (d == 0) continue;
      const std::uint64_t seed = derive_seed(instance_seed(cfg.seed, in), "faithfulness");
      AttributionResult attr;
      LoopConfig lc = cfg.loop;
      switch (method) {
        case AttributionMethod::kLoo: attr = leave_one_out(text, classify, label); break;
        case AttributionMethod::kLime:
          attr = lime_attribute(text, classify, label, detail::surrogate_for(lc, method, d, seed));
          break;
        case AttributionMethod::kKernelShap:
          attr = kernel_shap(text, classify, label, detail::surrogate_for(lc, method, d, seed));
          break;
        case AttributionMethod::kExternal:
          if (!services.attribution) throw Error(ErrorCode::kConfig, "external attribution service not configured");
          attr = services.attribution->attribute(text, label);
          break;
      }
      const FaithfulnessResult f = faithfulness(text, attr, classify, label, cfg.aopc_bins);
      row.comprehensiveness += f.comprehensiveness;
      row.sufficiency += f.sufficiency;
      if (f.tau_loo) {
        tau_sum += *f.tau_loo;
        ++row.tau_defined;
      }
      ++row.n;
    }
    if (row.n) {
      row.comprehensiveness /= static_cast<double>(row.n);
      row.sufficiency /= static_cast<double>(row.n);
    }
    if (row.tau_defined) row.tau_loo = tau_sum / static_cast<double>(row.tau_defined);
    rows.push_back(row);
  }
  return rows;
}

inline std::string format_faithfulness(const std::vector<FaithfulnessRow>& rows) {
  std::ostringstream out;
  out << "method\tn\tcomprehensiveness\tsufficiency\ttau_loo\n";
  for (const auto& r : rows) {
    out << r.method << '\t' << r.n << '\t' << fixed(r.comprehensiveness, 4) << '\t' << fixed(r.sufficiency, 4) << '\t'
        << fixed(r.tau_loo) << '\n';
  }
  return out.str();
}

}  // namespace cfr
