#include <gtest/gtest.h>

#include "cfr/harness.hpp"
#include "fixtures.hpp"

using namespace cfr;

namespace {

fs::path samples() { return fs::path(CFR_SOURCE_DIR) / "samples"; }

Json mini_config() {
  return Json::parse(R"({
    "labels": ["negative", "positive"],
    "seed": 3,
    "parallelism": 3,
    "loop": {"max_iterations": 4, "feedback": "confidence"},
    "services": {
      "classifier": {"kind": "lexicon", "weights": {"boring": {"negative": 2.0}, "great": {"positive": 3.0},
                                                   "awful": {"negative": 2.0}, "fine": {"positive": 2.5}}},
      "generator": {"kind": "scripted", "critique": "swap it",
                    "rules": [{"from": "boring", "to": "great", "round": 1},
                              {"from": "great", "to": "boring", "round": 2},
                              {"from": "awful", "to": "fine", "requires": "this prediction: awful"}]},
      "embedder": {"kind": "hash", "dim": 32},
      "scorer": {"kind": "unigram", "probs": {"the": 0.1}, "unk": 0.01},
      "judges": [{"name": "a", "kind": "fixed", "scores": [5, 5, 5]},
                 {"name": "b", "kind": "fixed", "scores": [5, 5, 5]}]
    }
  })");
}

std::vector<Instance> mini_dataset() {
  return {fx::review("a", "the plot was boring"),
          fx::review("b", "the cast was awful and the script never gave them anything to work with"),
          fx::review("c", "the film was boring and long"), fx::review("d", "nothing here")};
}

std::string slurp(const fs::path& p) { return fx::read_text(p); }

}  // namespace

TEST(Config, ParsesSampleConfigs) {
  const HarnessConfig s = load_config(samples() / "sentiment" / "config.json");
  EXPECT_EQ(s.labels.size(), 2u);
  EXPECT_EQ(s.loop.feedback, FeedbackKind::kConfidence);
  EXPECT_EQ(s.ablation.size(), 18u);
  const HarnessConfig n = load_config(samples() / "nli" / "config.json", 77);
  EXPECT_EQ(n.seed, 77u);
  EXPECT_EQ(n.schema.edit_field, "hypothesis");
  EXPECT_TRUE(n.ss_concatenated);
  EXPECT_EQ(n.loop.method, AttributionMethod::kLoo);
}

TEST(Config, RejectsBadValues) {
  auto expect_config_error = [](Json j) {
    try {
      parse_config(j, ".");
      FAIL() << j.dump();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig) << j.dump();
    }
  };
  Json j = mini_config();
  j["labels"] = {"only"};
  expect_config_error(j);
  j = mini_config();
  j["loop"]["feedback"] = "attribution";
  expect_config_error(j);
  j = mini_config();
  j["loop"]["feedback"] = "telepathy";
  expect_config_error(j);
  j = mini_config();
  j["window"] = {{"size", 8}, {"stride", 16}};
  expect_config_error(j);
  j = mini_config();
  j["schema"] = {{"fields", {"premise"}}, {"edit_field", "hypothesis"}};
  expect_config_error(j);
  j = mini_config();
  j["metrics"] = {{"ss_embed", "whatever"}};
  expect_config_error(j);
}

TEST(Config, DescribeNames) {
  LoopConfig c;
  EXPECT_EQ(describe(c), "none");
  c.feedback = FeedbackKind::kAttribution;
  c.method = AttributionMethod::kKernelShap;
  c.early_stop = false;
  EXPECT_EQ(describe(c), "attribution_top_kernel_shap_no_early_stop");
}

TEST(Dataset, LoadsNliSchema) {
  const HarnessConfig cfg = load_config(samples() / "nli" / "config.json");
  const auto data = load_dataset(samples() / "nli" / "pairs.jsonl", cfg.schema, cfg.labels);
  ASSERT_EQ(data.size(), 6u);
  EXPECT_EQ(data[1].edit_text(), "The dogs are sleeping indoors.");
  EXPECT_EQ(field_text(data[1].text_fields, "premise"), "Two dogs run across a snowy field.");
}

TEST(Dataset, ErrorsCarryLineNumbers) {
  fx::TempDir dir;
  const Schema schema;
  const LabelSpace labels({"negative", "positive"});
  auto expect_error = [&](const std::string& content, ErrorCode code, const std::string& where) {
    fx::write_text(dir / "d.jsonl", content);
    try {
      load_dataset(dir / "d.jsonl", schema, labels);
      FAIL() << content;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), code);
      EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
    }
  };
  const std::string ok = R"({"id": 1, "text": "fine", "label": "positive"})";
  expect_error(ok + "\n{not json\n", ErrorCode::kInput, "d.jsonl:2:");
  expect_error(ok + "\n\n" + R"({"id": 2, "label": "positive"})" + "\n", ErrorCode::kSchema, "d.jsonl:3:");
  expect_error(R"({"id": 2, "text": "x", "label": "meh"})", ErrorCode::kSchema, "unknown label");
  expect_error(R"({"id": 2, "text": "x", "label": "positive", "target_label": "meh"})", ErrorCode::kSchema,
               "target");
  fx::write_text(dir / "d.jsonl", ok + "\r\n   \n");
  EXPECT_EQ(load_dataset(dir / "d.jsonl", schema, labels).front().id, "1");
}

TEST(Metrics, TransitionsHistogramCarriesStoppedTraces) {
  auto r = fx::rig(fx::flip_at(1));
  const Trace t = run_instance(fx::review("x", "The movie was boring."), fx::loop(), r.services(), 1);
  auto never = fx::rig({});
  const Trace u = run_instance(fx::review("y", "The movie was boring."), fx::loop(), never.services(), 1);
  const RunMetrics m = compute_metrics({t, u}, 5);
  ASSERT_EQ(m.transitions.size(), 6u);
  EXPECT_EQ(m.transitions[0].get(TransitionKind::kFailToFail), 2u);
  EXPECT_EQ(m.transitions[1].get(TransitionKind::kFailToSuccess), 1u);
  for (std::size_t k = 2; k < 6; ++k) {
    EXPECT_EQ(m.transitions[k].get(TransitionKind::kPreviousSuccess), 1u);
    EXPECT_EQ(m.transitions[k].get(TransitionKind::kFailToFail), 1u);
  }
  EXPECT_DOUBLE_EQ(*m.lfr, 0.5);
  EXPECT_DOUBLE_EQ(m.pass_at_k[0], 0.0);
  EXPECT_DOUBLE_EQ(m.pass_at_k[1], 0.5);
}

TEST(RunDir, SuffixedNeverReused) {
  fx::TempDir dir;
  EXPECT_EQ(create_run_dir(dir.path, "x").filename(), "x");
  EXPECT_EQ(create_run_dir(dir.path, "x").filename(), "x-1");
  fx::write_text(dir / "f", "1");
  EXPECT_THROW(write_file(dir / "f", "2"), Error);
}

TEST(Batch, DeterministicAcrossRerunsAndParallelism) {
  fx::TempDir dir;
  HarnessConfig cfg = parse_config(mini_config(), ".");
  const auto services = build_services(cfg);
  RunOptions opts;
  opts.output_root = dir.path;
  const auto a = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  cfg.parallelism = 1;
  const auto b = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  EXPECT_NE(a.dir, b.dir);
  EXPECT_EQ(slurp(traces_path(a.dir)), slurp(traces_path(b.dir)));
  EXPECT_EQ(slurp(a.dir / "metrics.json"), slurp(b.dir / "metrics.json"));
  const Json manifest = load_manifest(a.dir);
  EXPECT_EQ(manifest.at("status"), "ok");
  EXPECT_EQ(manifest.at("config").at("seed"), 3);
  EXPECT_EQ(manifest.at("models").at("classifier"), "mock-lexicon");
  EXPECT_FALSE(a.over_threshold);
  EXPECT_EQ(a.metrics.n, 4u);
}

TEST(Batch, ReportRecomputesFromTraces) {
  fx::TempDir dir;
  const HarnessConfig cfg = parse_config(mini_config(), ".");
  const auto services = build_services(cfg);
  RunOptions opts;
  opts.output_root = dir.path;
  opts.name = "conf";
  const auto r = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  const auto [name, m] = report_run(r.dir);
  EXPECT_EQ(name, "confidence");
  EXPECT_EQ(to_json(m).dump(), to_json(r.metrics).dump());
  // a and c flip at round 1; b and d never flip with confidence feedback.
  EXPECT_DOUBLE_EQ(*m.lfr, 0.5);
  EXPECT_DOUBLE_EQ(m.pass_at_k[0], 0.0);
  EXPECT_DOUBLE_EQ(m.pass_at_k[1], 0.5);
  ASSERT_TRUE(m.ss);
  ASSERT_TRUE(m.ppl);
}

TEST(Batch, AbortThresholdHaltsAndFlagsRun) {
  fx::TempDir dir;
  HarnessConfig cfg = parse_config(mini_config(), ".");
  cfg.abort_threshold = 0.25;
  cfg.parallelism = 1;
  auto services = build_services(cfg);
  services.generator = std::make_unique<mock::FunctionGenerator>(
      [](const std::string&) -> std::string { throw TransportError("down", 1); });
  RunOptions opts;
  opts.output_root = dir.path;
  const auto r = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  EXPECT_TRUE(r.over_threshold);
  // floor(0.25 * 4) = 1 tolerated abort; the second halts dispatch
  EXPECT_EQ(r.metrics.aborted, 2u);
  EXPECT_EQ(load_manifest(r.dir).at("status"), "failed");
}

TEST(Ablation, DeltasAgainstNoFeedbackArm) {
  fx::TempDir dir;
  Json j = mini_config();
  j["ablation"] = {{"arms", Json::array({{{"feedback", "none"}},
                                          {{"feedback", "attribution"}, {"method", "loo"}, {"selection", "top"}},
                                          {{"feedback", "attribution"}, {"method", "loo"}, {"selection", "least"}},
                                          {{"feedback", "none"}, {"early_stop", false}}})}};
  const HarnessConfig cfg = parse_config(j, ".");
  const auto services = build_services(cfg);
  RunOptions opts;
  opts.output_root = dir.path;
  opts.name = "suite";
  fs::path suite;
  const auto rows = ablation_suite(mini_dataset(), cfg, services, opts, &suite);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].arm, "none");
  EXPECT_DOUBLE_EQ(*rows[0].d_lfr, 0.0);
  // "awful" only flips when it is named first among the attributed words
  EXPECT_DOUBLE_EQ(*rows[1].d_lfr, 0.25);
  EXPECT_DOUBLE_EQ(*rows[2].d_lfr, 0.0);
  // without early stop, "boring" flips at round 1 and reverts at round 2
  EXPECT_EQ(rows[3].arm, "none_no_early_stop");
  EXPECT_DOUBLE_EQ(*rows[3].d_lfr, 0.0);
  EXPECT_LT(*rows[3].metrics.lfr, *rows[0].metrics.lfr);
  EXPECT_TRUE(fs::exists(suite / "ablation.json"));
  EXPECT_TRUE(fs::exists(suite / "ablation.tsv"));
}

TEST(Cda, RecordCountsPerPolicy) {
  fx::TempDir dir;
  const HarnessConfig cfg = parse_config(mini_config(), ".");
  const auto services = build_services(cfg);
  RunOptions opts;
  opts.output_root = dir.path;
  const auto r = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  const std::size_t n = 4;
  const std::size_t valid = 2;
  EXPECT_EQ(emit_cda(r.dir, CdaPolicy::kValidOnly, dir / "v.jsonl"), n + valid);
  EXPECT_EQ(emit_cda(r.dir, CdaPolicy::kAll, dir / "all.jsonl"), 2 * n);
  EXPECT_THROW(emit_cda(r.dir, CdaPolicy::kAll, dir / "all.jsonl"), Error);
  // the augmented file loads back as a dataset
  const auto data = load_dataset(dir / "v.jsonl", Schema{}, cfg.labels);
  ASSERT_EQ(data.size(), n + valid);
  EXPECT_EQ(data[1].id, "a#cf");
  EXPECT_EQ(data[1].gold_label, "positive");
  EXPECT_EQ(data[1].edit_text(), "the plot was great");
}

TEST(Cda, AbortedTraceContributesOriginalOnly) {
  fx::TempDir dir;
  HarnessConfig cfg = parse_config(mini_config(), ".");
  cfg.abort_threshold = 1.0;
  auto services = build_services(cfg);
  services.generator = std::make_unique<mock::FunctionGenerator>(
      [](const std::string&) -> std::string { throw TransportError("down", 1); });
  RunOptions opts;
  opts.output_root = dir.path;
  const auto r = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  EXPECT_EQ(emit_cda(r.dir, CdaPolicy::kAll, dir / "c.jsonl"), 4u);
}

TEST(Score, PercentTwoDecimalsAndAlignment) {
  fx::TempDir dir;
  fx::write_text(dir / "gold.jsonl", "{\"id\":\"1\",\"label\":\"a\"}\n{\"id\":\"2\",\"label\":\"b\"}\n");
  fx::write_text(dir / "same.jsonl", "{\"id\":\"2\",\"prediction\":\"b\"}\n{\"id\":\"1\",\"prediction\":\"a\"}\n");
  fx::write_text(dir / "half.jsonl", "{\"id\":1,\"label\":\"a\"}\n{\"id\":2,\"label\":\"a\"}\n");
  fx::write_text(dir / "short.jsonl", "{\"id\":\"1\",\"label\":\"a\"}\n");
  fx::write_text(dir / "extra.jsonl", "{\"id\":\"1\",\"label\":\"a\"}\n{\"id\":\"2\",\"label\":\"b\"}\n{\"id\":\"3\",\"label\":\"b\"}\n");
  EXPECT_EQ(score_predictions(dir / "same.jsonl", dir / "gold.jsonl").formatted, "100.00");
  EXPECT_EQ(score_predictions(dir / "half.jsonl", dir / "gold.jsonl").formatted, "50.00");
  for (const char* f : {"short.jsonl", "extra.jsonl"}) {
    try {
      score_predictions(dir / f, dir / "gold.jsonl");
      FAIL() << f;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kAlignment);
    }
  }
}

TEST(Judge, AgreeingJudgesAndSampleStd) {
  fx::TempDir dir;
  const HarnessConfig cfg = parse_config(mini_config(), ".");
  auto services = build_services(cfg);
  RunOptions opts;
  opts.output_root = dir.path;
  const auto r = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  std::vector<std::pair<std::string, Generator*>> judges;
  for (auto& [n, g] : services.judges) judges.emplace_back(n, g.get());
  const JudgeReport rep = judge_run({r.dir}, judges, services.prompts, GenerationParams{});
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].rated, 4u);
  EXPECT_DOUBLE_EQ(rep.rows[0].mean[0], 5.0);
  EXPECT_DOUBLE_EQ(rep.rows[0].stddev[0], 0.0);
  // constant ratings: perfect agreement
  EXPECT_DOUBLE_EQ(*rep.inter_judge_alpha.at("confidence")[0], 1.0);
  EXPECT_NE(format_judge_report(rep).find("5.00 \xC2\xB1 0.00"), std::string::npos);
}

TEST(Judge, DisagreementHumansAndParseErrors) {
  fx::TempDir dir;
  const HarnessConfig cfg = parse_config(mini_config(), ".");
  auto services = build_services(cfg);
  RunOptions opts;
  opts.output_root = dir.path;
  const auto r = run_batch(mini_dataset(), cfg, cfg.loop, services, opts);
  detail::SequenceJudge up({{1, 1, 1}, {6, 6, 6}});
  detail::SequenceJudge down({{6, 6, 6}, {1, 1, 1}});
  int calls = 0;
  mock::FunctionGenerator flaky([&](const std::string&) {
    return ++calls % 2 ? mock::judge_answer(3, 4, 5) : std::string("no tags");
  });
  fx::write_text(dir / "h.jsonl",
                 "{\"id\":\"a\",\"rater\":\"h1\",\"completeness\":1,\"satisfaction\":1,\"feasibility\":1}\n"
                 "{\"id\":\"b\",\"rater\":\"h1\",\"completeness\":6,\"satisfaction\":6,\"feasibility\":6}\n"
                 "{\"id\":\"a\",\"rater\":\"h2\",\"completeness\":1,\"satisfaction\":2,\"feasibility\":1}\n"
                 "{\"id\":\"b\",\"rater\":\"h2\",\"completeness\":6,\"satisfaction\":5,\"feasibility\":6}\n");
  const JudgeReport rep = judge_run({r.dir}, {{"up", &up}, {"down", &down}, {"flaky", &flaky}}, services.prompts,
                                    GenerationParams{}, load_human_ratings(dir / "h.jsonl"));
  EXPECT_LT(*rep.inter_judge_alpha.at("confidence")[0], 0.0);
  EXPECT_EQ(rep.rows[2].rated, 2u);
  EXPECT_EQ(rep.rows[2].parse_errors, 2u);
  EXPECT_DOUBLE_EQ(*rep.human_alpha.at("confidence")[0], 1.0);
  EXPECT_DOUBLE_EQ(*rep.judge_human_alpha.at("confidence").at("up")[0], 1.0);
  EXPECT_LT(*rep.judge_human_alpha.at("confidence").at("down")[0], 0.0);
}

TEST(Faithfulness, ReportOverDataset) {
  Json j = mini_config();
  j["faithfulness"] = {{"methods", {"loo", "kernel_shap"}}};
  const HarnessConfig cfg = parse_config(j, ".");
  const auto services = build_services(cfg);
  const auto rows = faithfulness_report(mini_dataset(), cfg, services);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].method, "loo");
  EXPECT_EQ(rows[0].n, 4u);
  ASSERT_TRUE(rows[0].tau_loo);
  EXPECT_DOUBLE_EQ(*rows[0].tau_loo, 1.0);
  EXPECT_GT(rows[1].comprehensiveness, 0.0);
}
