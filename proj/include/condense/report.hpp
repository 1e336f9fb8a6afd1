#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "condense/geometry.hpp"
#include "condense/theory.hpp"
#include "condense/train.hpp"

namespace condense {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kAnalysisSchema = "condense.analysis";
inline constexpr const char* kCompareSchema = "condense.compare";
inline constexpr const char* kVerifySchema = "condense.verify";

nlohmann::ordered_json to_json(const CondensationSummary& s);
CondensationSummary summary_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const StepMetrics& m);
StepMetrics step_metrics_from_json(const nlohmann::json& j);

/// Mean of per-trace histogram stacks (all traces share B and layer count).
HistogramStack average_histograms(std::span<const HistogramStack> stacks);

/// Condensation data behind depth heatmaps plus optional training curves.
struct AnalysisReport {
  CondensationSummary summary;
  HistogramStack histogram;
  std::vector<StepMetrics> loss_curve;
  std::vector<Snapshot> snapshots;
  std::optional<nlohmann::ordered_json> config;
};

AnalysisReport analyze_traces(std::span<const EmbeddingTrace> traces, std::size_t bins);

nlohmann::ordered_json to_json(const AnalysisReport& r);
AnalysisReport analysis_report_from_json(const nlohmann::json& j);

/// CSV with header layer,bin_left,bin_right,frequency; one row per (layer, bin).
std::string histogram_csv(const HistogramStack& h);

/// Serialized JSON text; numbers print as shortest round-trip decimals.
std::string dump(const nlohmann::ordered_json& j);

enum class Verdict { a_more_condensed, b_more_condensed, tie };
std::string_view to_string(Verdict v);

struct CompareReport {
  std::vector<double> mu_a, mu_b, delta_mu;  // delta = b - a, layers 1..L
  std::optional<double> delta_rho, delta_tau;
  double final_mu_a = 0.0, final_mu_b = 0.0;
  Verdict verdict = Verdict::tie;
};

/// Compares two analysis reports; the verdict is decided by final-layer mu.
CompareReport compare_reports(const AnalysisReport& a, const AnalysisReport& b);
nlohmann::ordered_json to_json(const CompareReport& c);

nlohmann::ordered_json to_json(const CheckRecord& c);

}  // namespace condense
