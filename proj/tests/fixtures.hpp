#pragma once

#include <unistd.h>

#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cfr/harness.hpp"
#include "cfr/loop.hpp"
#include "cfr/mocks.hpp"

namespace fx {

inline cfr::LabelSpace sentiment() { return cfr::LabelSpace({"negative", "positive"}); }

// "boring"/"awful" push negative, "great"/"fun" push positive.
inline std::unique_ptr<cfr::mock::LexiconClassifier> lexicon() {
  return std::make_unique<cfr::mock::LexiconClassifier>(
      sentiment(), cfr::mock::LexiconClassifier::Weights{{"boring", {{"negative", 2.0}}},
                                                         {"awful", {{"negative", 1.5}}},
                                                         {"great", {{"positive", 3.0}}},
                                                         {"fun", {{"positive", 1.0}}},
                                                         {"movie", {{"positive", 0.1}}}});
}

inline cfr::Instance review(std::string id, std::string text) {
  cfr::Instance in;
  in.id = std::move(id);
  in.text_fields = {{"text", std::move(text)}};
  in.gold_label = "negative";
  in.edit_field = "text";
  return in;
}

// Flips "boring" -> "great" on exactly round j; otherwise echoes.
inline std::vector<cfr::mock::RewriteRule> flip_at(int j) {
  return {cfr::mock::RewriteRule{"boring", "great", j, std::nullopt, true}};
}

// Flip on even rounds, revert on odd ones.
inline std::vector<cfr::mock::RewriteRule> oscillating(int max_rounds) {
  std::vector<cfr::mock::RewriteRule> rules;
  for (int k = 0; k <= max_rounds; ++k) {
    if (k % 2 == 0) {
      rules.push_back({"boring", "great", k, std::nullopt, true});
    } else {
      rules.push_back({"great", "boring", k, std::nullopt, true});
    }
  }
  return rules;
}

struct Rig {
  std::unique_ptr<cfr::Classifier> classifier;
  std::unique_ptr<cfr::WindowedClassifier> windowed;
  std::unique_ptr<cfr::Generator> generator;
  std::unique_ptr<cfr::AttributionService> attribution;
  cfr::PromptSet prompts;

  cfr::LoopServices services() const {
    return {windowed.get(), generator.get(), attribution.get(), &prompts};
  }
};

inline Rig rig(std::vector<cfr::mock::RewriteRule> rules, std::string critique = "make it upbeat") {
  Rig r;
  r.classifier = lexicon();
  r.windowed = std::make_unique<cfr::WindowedClassifier>(*r.classifier, cfr::WindowConfig{});
  r.generator = std::make_unique<cfr::mock::ScriptedGenerator>(std::move(rules), std::move(critique));
  return r;
}

inline cfr::LoopConfig loop(cfr::FeedbackKind kind = cfr::FeedbackKind::kConfidence, int k = 5,
                            bool early_stop = true) {
  cfr::LoopConfig c;
  c.max_iterations = k;
  c.feedback = kind;
  c.early_stop = early_stop;
  if (kind == cfr::FeedbackKind::kAttribution) c.method = cfr::AttributionMethod::kLoo;
  return c;
}

// Temporary directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("cfr-test-" + std::to_string(cfr::splitmix64(reinterpret_cast<std::uintptr_t>(this) ^
                                                          static_cast<std::uint64_t>(::getpid()))));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace fx
