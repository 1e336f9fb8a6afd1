#include "condense/commands.hpp"

#include <algorithm>

#include "condense/io.hpp"

namespace condense {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

AnalysisReport cmd_train(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const auto corpus = ingest_corpus(cfg.corpus);
  std::optional<TrainState> resume;
  if (!cfg.init_checkpoint.empty()) resume = load_checkpoint(cfg.init_checkpoint).state;

  TrainingRun run;
  try {
    run = run_training(cfg.train, cfg.model, corpus, cfg.traces, std::move(resume));
  } catch (const TrainingError& e) {
    throw TrainingError(e.step(), e.snapshot(),
                        std::string(e.what()) + " (seed " + std::to_string(cfg.train.seed) + ", loss " +
                            std::string(to_string(cfg.train.loss.kind)) + ", corpus " + cfg.corpus + ")");
  }

  AnalysisReport report = analyze_traces(run.final_traces, cfg.bins);
  report.loss_curve = run.checkpoint.log.steps;
  report.snapshots = run.checkpoint.log.snapshots;
  report.config = to_json(cfg);
  // Paths depend on the invocation, not on the experiment.
  report.config->erase("output_dir");

  fs::create_directories(out_dir / kTraceDir);
  save_checkpoint(run.checkpoint, out_dir / kCheckpointFile);
  for (const auto& t : run.final_traces) write_trace(t, out_dir / kTraceDir / (t.sequence_id + ".emtr"));
  write_file_atomic(out_dir / kHistogramFile, histogram_csv(report.histogram));
  write_file_atomic(out_dir / kReportFile, dump(to_json(report)));
  return report;
}

AnalysisReport cmd_analyze(const std::vector<fs::path>& paths, std::size_t bins, const fs::path& out_dir) {
  if (paths.empty()) throw DataError("analyze: no trace files given");
  if (bins < 2) throw ConfigError("bins must be >= 2");
  std::vector<EmbeddingTrace> traces;
  for (const auto& p : paths) traces.push_back(read_trace(p));
  AnalysisReport report = analyze_traces(traces, bins);
  write_file_atomic(out_dir / kHistogramFile, histogram_csv(report.histogram));
  write_file_atomic(out_dir / kReportFile, dump(to_json(report)));
  return report;
}

AnalysisReport load_analysis_report(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return analysis_report_from_json(j);
}

CompareReport cmd_compare(const fs::path& report_a, const fs::path& report_b, const fs::path& out_dir) {
  const CompareReport c = compare_reports(load_analysis_report(report_a), load_analysis_report(report_b));
  write_file_atomic(out_dir / kCompareFile, dump(to_json(c)));
  return c;
}

bool VerifyReport::any_failed() const {
  return std::any_of(checks.begin(), checks.end(), [](const auto& c) { return c.status == CheckStatus::fail; });
}

ojson to_json(const VerifyReport& r, const TheoryGrid& grid) {
  ojson checks = ojson::array();
  std::size_t passed = 0, failed = 0, inconclusive = 0;
  for (const auto& c : r.checks) {
    checks.push_back(to_json(c));
    switch (c.status) {
      case CheckStatus::pass: ++passed; break;
      case CheckStatus::fail: ++failed; break;
      case CheckStatus::inconclusive: ++inconclusive; break;
    }
  }
  return ojson{{"schema", kVerifySchema},
               {"schema_version", kReportSchemaVersion},
               {"grid", ojson{{"radii", grid.radii},
                              {"pads", grid.pads},
                              {"trials", grid.trials},
                              {"seed", grid.seed},
                              {"repeat_pairs", grid.repeat_pairs},
                              {"repeat_max_dim", grid.repeat_max_dim},
                              {"repeat_max_k", grid.repeat_max_k}}},
               {"counts", ojson{{"pass", passed}, {"fail", failed}, {"inconclusive", inconclusive}}},
               {"checks", std::move(checks)}};
}

VerifyReport cmd_verify_theory(const TheoryGrid& grid, const fs::path& out_dir) {
  VerifyReport r;
  auto append = [&](std::vector<CheckRecord> v) { r.checks.insert(r.checks.end(), v.begin(), v.end()); };
  append(verify_repeat_padding(grid));
  append(verify_alpha_bounds(grid));
  r.checks.push_back(verify_gpt2_example(grid));
  append(verify_factorization(grid));
  write_file_atomic(out_dir / kVerifyFile, dump(to_json(r, grid)));
  return r;
}

ojson to_json(const std::vector<GradcheckCase>& cases, double tolerance) {
  ojson arr = ojson::array();
  for (const auto& c : cases) {
    arr.push_back(ojson{{"name", c.name},
                        {"shape", c.shape},
                        {"coordinates", c.coordinates},
                        {"rel_error", c.rel_error},
                        {"passed", c.passed}});
  }
  return ojson{{"tolerance", tolerance}, {"cases", std::move(arr)}};
}

std::vector<GradcheckCase> cmd_gradcheck(std::uint64_t seed, const fs::path& out_dir) {
  auto cases = run_gradcheck_suite(seed);
  write_file_atomic(out_dir / kGradcheckFile, dump(to_json(cases, kGradcheckTolerance)));
  return cases;
}

}  // namespace condense
