#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condense/config.hpp"
#include "condense/gradcheck_suite.hpp"
#include "condense/report.hpp"
#include "condense/theory.hpp"

namespace condense {

// File names inside an output directory.
inline constexpr const char* kCheckpointFile = "checkpoint.ckpt";
inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kHistogramFile = "histograms.csv";
inline constexpr const char* kTraceDir = "traces";
inline constexpr const char* kCompareFile = "compare.json";
inline constexpr const char* kVerifyFile = "verify.json";
inline constexpr const char* kGradcheckFile = "gradcheck.json";

/// Trains per the config and writes the checkpoint, report, histogram CSV,
/// and the final held-out traces under `out_dir`.
AnalysisReport cmd_train(const RunConfig& cfg, const std::filesystem::path& out_dir);

/// Reads trace files and writes report.json and histograms.csv under `out_dir`.
AnalysisReport cmd_analyze(const std::vector<std::filesystem::path>& traces, std::size_t bins,
                           const std::filesystem::path& out_dir);

/// Loads an analysis report written by train or analyze.
AnalysisReport load_analysis_report(const std::filesystem::path& path);

CompareReport cmd_compare(const std::filesystem::path& report_a, const std::filesystem::path& report_b,
                          const std::filesystem::path& out_dir);

struct VerifyReport {
  std::vector<CheckRecord> checks;
  bool any_failed() const;
};
nlohmann::ordered_json to_json(const VerifyReport& r, const TheoryGrid& grid);
VerifyReport cmd_verify_theory(const TheoryGrid& grid, const std::filesystem::path& out_dir);

nlohmann::ordered_json to_json(const std::vector<GradcheckCase>& cases, double tolerance);
std::vector<GradcheckCase> cmd_gradcheck(std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace condense
