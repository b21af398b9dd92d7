// cfrefine: command-line front end for runs, ablations and reports.
//
// Exit codes: 0 ok, 1 config/input error, 2 too many aborted instances,
// 3 service failure.

#include <csignal>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfr/harness.hpp"
#include "cfr/http.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;
constexpr int kExitService = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "run config (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
}

// Seeded subsample, kept in dataset order.
std::vector<cfr::Instance> sample(std::vector<cfr::Instance> data, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n >= data.size()) return data;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  cfr::Rng rng(cfr::derive_seed(seed, "sample"));
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + cfr::draw_index(rng, idx.size() - i)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<cfr::Instance> out;
  for (auto i : idx) out.push_back(std::move(data[i]));
  return out;
}

int exit_code_for(const cfr::Error& e) {
  switch (e.code()) {
    case cfr::ErrorCode::kTransport:
    case cfr::ErrorCode::kProtocol:
      return kExitService;
    default:
      return kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual refinement engine and evaluation harness"};
  app.require_subcommand(1);

  Common run_c, ablate_c, report_c, judge_c, cda_c, score_c, faith_c, serve_c;
  std::string dataset, out_root = "runs", name, suite_name = "ablation";
  std::size_t sample_n = 0;
  std::vector<std::string> run_dirs;
  std::string human, policy = "valid_only", out_file, pred, gold;
  int port = 8080;

  auto* run = app.add_subcommand("run", "refine every instance of a dataset");
  add_common(run, run_c, true);
  run->add_option("--dataset", dataset, "JSONL dataset")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_root, "output root for run directories");
  run->add_option("--name", name, "run directory name (default: loop variant)");
  run->add_option("--sample", sample_n, "refine a seeded sample of N instances");

  auto* ablate = app.add_subcommand("ablate", "run the feedback ablation grid");
  add_common(ablate, ablate_c, true);
  ablate->add_option("--dataset", dataset, "JSONL dataset")->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", out_root, "output root");
  ablate->add_option("--name", suite_name, "suite directory name");
  ablate->add_option("--sample", sample_n, "use a seeded sample of N instances");

  auto* report = app.add_subcommand("report", "recompute metrics from trace files");
  add_common(report, report_c, false);
  report->add_option("--run", run_dirs, "run directory")->required()->check(CLI::ExistingDirectory);

  auto* judge = app.add_subcommand("judge", "rate final counterfactuals with judge models");
  add_common(judge, judge_c, true);
  judge->add_option("--run", run_dirs, "run directory (repeatable)")->required()->check(CLI::ExistingDirectory);
  judge->add_option("--human", human, "human ratings JSONL")->check(CLI::ExistingFile);

  auto* cda = app.add_subcommand("cda", "emit an augmentation dataset from a run");
  add_common(cda, cda_c, false);
  cda->add_option("--run", run_dirs, "run directory")->required()->check(CLI::ExistingDirectory)->expected(1);
  cda->add_option("--policy", policy, "valid_only | all")->check(CLI::IsMember({"valid_only", "all"}));
  cda->add_option("--out", out_file, "output JSONL")->required();

  auto* score = app.add_subcommand("score", "accuracy of a prediction file against gold labels");
  add_common(score, score_c, false);
  score->add_option("--pred", pred, "predictions JSONL {id, prediction|label}")->required()->check(CLI::ExistingFile);
  score->add_option("--gold", gold, "gold JSONL {id, label}")->required()->check(CLI::ExistingFile);

  auto* faith = app.add_subcommand("faithfulness", "AOPC and LOO agreement of the attribution methods");
  add_common(faith, faith_c, true);
  faith->add_option("--dataset", dataset, "JSONL dataset")->required()->check(CLI::ExistingFile);
  faith->add_option("--sample", sample_n, "use a seeded sample of N instances");

  auto* serve = app.add_subcommand("serve", "expose the configured mock services over HTTP");
  add_common(serve, serve_c, true);
  serve->add_option("--port", port, "listen port");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run || *ablate || *faith) {
      const Common& c = *run ? run_c : (*ablate ? ablate_c : faith_c);
      cfr::HarnessConfig cfg = cfr::load_config(c.config, c.seed);
      auto data = cfr::load_dataset(dataset, cfg.schema, cfg.labels);
      if (sample_n) {
        data = sample(std::move(data), sample_n, cfg.seed);
        cfr::Json ids = cfr::Json::array();
        for (const auto& in : data) ids.push_back(in.id);
        cfg.snapshot["sample"] = cfr::Json{{"n", sample_n}, {"ids", ids}};
      }
      cfr::ServiceBundle services = cfr::build_services(cfg);
      cfr::RunOptions opts;
      opts.output_root = out_root;
      opts.dataset_path = dataset;

      if (*faith) {
        std::cout << cfr::format_faithfulness(cfr::faithfulness_report(data, cfg, services));
        return kExitOk;
      }
      if (*run) {
        opts.name = name.empty() ? cfr::describe(cfg.loop) : name;
        const cfr::RunResult r = cfr::run_batch(data, cfg, cfg.loop, services, opts);
        std::cout << r.dir.string() << "\n" << cfr::format_report(opts.name, r.metrics);
        if (r.over_threshold) {
          std::cerr << "too many aborted instances (" << r.metrics.aborted << " of " << r.metrics.n << ")\n";
          return kExitPartial;
        }
        return kExitOk;
      }
      opts.name = suite_name;
      cfr::fs::path suite;
      const auto rows = cfr::ablation_suite(data, cfg, services, opts, &suite);
      std::cout << suite.string() << "\n" << cfr::format_ablation(rows);
      for (const auto& r : rows) {
        if (r.metrics.aborted * 2 > r.metrics.n) return kExitPartial;
      }
      return kExitOk;
    }

    if (*report) {
      for (const auto& dir : run_dirs) {
        const auto [label, metrics] = cfr::report_run(dir);
        std::cout << cfr::format_report(label, metrics) << "\n";
      }
      return kExitOk;
    }

    if (*judge) {
      cfr::HarnessConfig cfg = cfr::load_config(judge_c.config, judge_c.seed);
      cfr::ServiceBundle services = cfr::build_services(cfg);
      std::vector<std::pair<std::string, cfr::Generator*>> judges;
      for (auto& [n, g] : services.judges) judges.emplace_back(n, g.get());
      std::optional<cfr::HumanRatings> humans;
      if (!human.empty()) humans = cfr::load_human_ratings(human);
      std::vector<cfr::fs::path> dirs(run_dirs.begin(), run_dirs.end());
      cfr::GenerationParams params = cfg.loop.generation;
      params.seed = cfg.seed;
      std::cout << cfr::format_judge_report(cfr::judge_run(dirs, judges, services.prompts, params, humans));
      return kExitOk;
    }

    if (*cda) {
      const std::size_t n = cfr::emit_cda(run_dirs.front(), cfr::parse_cda_policy(policy), out_file);
      std::cout << n << " records written to " << out_file << "\n";
      return kExitOk;
    }

    if (*score) {
      const cfr::ScoreResult r = cfr::score_predictions(pred, gold);
      std::cout << r.formatted << "\n";
      return kExitOk;
    }

    if (*serve) {
      cfr::HarnessConfig cfg = cfr::load_config(serve_c.config, serve_c.seed);
      cfr::ServiceBundle services = cfr::build_services(cfg);
      cfr::http::ServedServices s{services.classifier.get(), services.generator.get(), services.embedder.get(),
                                  services.scorer.get(), {}};
      if (services.attribution) {
        s.attribute = [&](const std::string& text, const cfr::Label& label) {
          const cfr::AttributionResult a = services.attribution->attribute(text, label);
          std::vector<cfr::AttributionSpan> spans;
          for (std::size_t i = 0; i < a.words.size(); ++i) spans.push_back({a.words[i], a.scores[i]});
          return spans;
        };
      }
      cfr::http::ServiceServer server(std::move(s));
      std::cout << "serving on 0.0.0.0:" << port << std::endl;
      server.serve_forever("0.0.0.0", port);
      return kExitOk;
    }
  } catch (const cfr::Error& e) {
    std::cerr << "error [" << cfr::to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error [io]: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
