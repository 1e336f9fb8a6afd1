#include "condense/report.hpp"

#include <cstdio>
#include <sstream>

#include "condense/errors.hpp"

namespace condense {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

ojson optional_number(const std::optional<double>& v) {
  return v ? ojson(*v) : ojson(nullptr);
}

std::optional<double> read_optional(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

ojson to_json(const CondensationSummary& s) {
  return ojson{{"n_sequences", s.n_sequences},
               {"layer0_mu", s.layer0_mu},
               {"mu", s.mu},
               {"final_norm_mu", optional_number(s.final_norm_mu)},
               {"spearman_rho", optional_number(s.spearman_rho)},
               {"kendall_tau", optional_number(s.kendall_tau)}};
}

CondensationSummary summary_from_json(const json& j) {
  CondensationSummary s;
  s.n_sequences = j.at("n_sequences").get<std::size_t>();
  s.layer0_mu = j.at("layer0_mu").get<double>();
  s.mu = j.at("mu").get<std::vector<double>>();
  s.final_norm_mu = read_optional(j, "final_norm_mu");
  s.spearman_rho = read_optional(j, "spearman_rho");
  s.kendall_tau = read_optional(j, "kendall_tau");
  return s;
}

ojson to_json(const StepMetrics& m) {
  return ojson{{"step", m.step}, {"ce", m.ce},       {"disp", m.disp},
               {"total", m.total}, {"grad_norm", m.grad_norm}, {"lr", m.lr}};
}

StepMetrics step_metrics_from_json(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<std::size_t>();
  m.ce = j.at("ce").get<double>();
  m.disp = j.at("disp").get<double>();
  m.total = j.at("total").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.lr = j.at("lr").get<double>();
  return m;
}

HistogramStack average_histograms(std::span<const HistogramStack> stacks) {
  if (stacks.empty()) throw std::invalid_argument("average_histograms: no stacks");
  HistogramStack out = stacks.front();
  for (std::size_t k = 1; k < stacks.size(); ++k) {
    const auto& s = stacks[k];
    if (s.edges != out.edges || s.frequency.size() != out.frequency.size()) {
      throw std::invalid_argument("average_histograms: incompatible stacks");
    }
    const double w = 1.0 / static_cast<double>(k + 1);
    for (std::size_t l = 0; l < out.frequency.size(); ++l)
      for (std::size_t b = 0; b < out.bins(); ++b)
        out.frequency[l][b] += (s.frequency[l][b] - out.frequency[l][b]) * w;
  }
  return out;
}

AnalysisReport analyze_traces(std::span<const EmbeddingTrace> traces, std::size_t bins) {
  if (traces.empty()) throw DataError("analyze: no traces");
  const std::size_t layers = traces.front().layers.size();
  std::string offenders;
  for (const auto& t : traces) {
    if (t.layers.size() != layers) {
      offenders += " " + t.sequence_id + "(" + std::to_string(t.layers.size()) + " layers)";
    }
  }
  if (!offenders.empty()) {
    throw DataError("inconsistent trace shapes, expected " + std::to_string(layers) + " layers:" + offenders);
  }
  std::vector<const EmbeddingTrace*> sorted;
  for (const auto& t : traces) sorted.push_back(&t);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](auto* a, auto* b) { return a->sequence_id < b->sequence_id; });
  std::vector<HistogramStack> stacks;
  for (const auto* t : sorted) stacks.push_back(histogram_stack(*t, bins));

  AnalysisReport r;
  r.summary = condensation_summary(traces);
  r.histogram = average_histograms(stacks);
  return r;
}

ojson to_json(const AnalysisReport& r) {
  ojson j{{"schema", kAnalysisSchema},
          {"schema_version", kReportSchemaVersion},
          {"layer_count", r.summary.mu.size()},
          {"summary", to_json(r.summary)},
          {"histogram", ojson{{"bins", r.histogram.bins()},
                              {"edges", r.histogram.edges},
                              {"frequency", r.histogram.frequency}}}};
  if (r.config) j["config"] = *r.config;
  if (!r.snapshots.empty()) {
    ojson snaps = ojson::array();
    for (const auto& s : r.snapshots) snaps.push_back(ojson{{"step", s.step}, {"summary", to_json(s.summary)}});
    j["snapshots"] = std::move(snaps);
  }
  if (!r.loss_curve.empty()) {
    ojson curve = ojson::array();
    for (const auto& m : r.loss_curve) curve.push_back(to_json(m));
    j["loss_curve"] = std::move(curve);
  }
  return j;
}

AnalysisReport analysis_report_from_json(const json& j) {
  return guarded("analysis report", [&] {
    if (j.at("schema").get<std::string>() != kAnalysisSchema) {
      throw DataError("not an analysis report (schema '" + j.at("schema").get<std::string>() + "')");
    }
    if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
      throw DataError("unsupported analysis report schema version");
    }
    AnalysisReport r;
    r.summary = summary_from_json(j.at("summary"));
    const auto& h = j.at("histogram");
    r.histogram.edges = h.at("edges").get<std::vector<double>>();
    r.histogram.frequency = h.at("frequency").get<std::vector<std::vector<double>>>();
    if (j.contains("config")) r.config = j.at("config");
    if (j.contains("snapshots")) {
      for (const auto& s : j.at("snapshots")) {
        r.snapshots.push_back(Snapshot{s.at("step").get<std::size_t>(), summary_from_json(s.at("summary"))});
      }
    }
    if (j.contains("loss_curve")) {
      for (const auto& m : j.at("loss_curve")) r.loss_curve.push_back(step_metrics_from_json(m));
    }
    return r;
  });
}

std::string histogram_csv(const HistogramStack& h) {
  std::string out = "layer,bin_left,bin_right,frequency\n";
  char line[128];
  for (std::size_t l = 0; l < h.frequency.size(); ++l) {
    for (std::size_t b = 0; b < h.bins(); ++b) {
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", l, h.edges[b], h.edges[b + 1],
                    h.frequency[l][b]);
      out += line;
    }
  }
  return out;
}

std::string dump(const ojson& j) { return j.dump(2) + "\n"; }

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::a_more_condensed: return "a_more_condensed";
    case Verdict::b_more_condensed: return "b_more_condensed";
    case Verdict::tie: return "tie";
  }
  return "?";
}

CompareReport compare_reports(const AnalysisReport& a, const AnalysisReport& b) {
  if (a.summary.mu.size() != b.summary.mu.size() || a.summary.mu.empty()) {
    throw DataError("compare: reports have different layer counts (" +
                    std::to_string(a.summary.mu.size()) + " vs " + std::to_string(b.summary.mu.size()) + ")");
  }
  CompareReport c;
  c.mu_a = a.summary.mu;
  c.mu_b = b.summary.mu;
  for (std::size_t l = 0; l < c.mu_a.size(); ++l) c.delta_mu.push_back(c.mu_b[l] - c.mu_a[l]);
  if (a.summary.spearman_rho && b.summary.spearman_rho) {
    c.delta_rho = *b.summary.spearman_rho - *a.summary.spearman_rho;
  }
  if (a.summary.kendall_tau && b.summary.kendall_tau) {
    c.delta_tau = *b.summary.kendall_tau - *a.summary.kendall_tau;
  }
  c.final_mu_a = c.mu_a.back();
  c.final_mu_b = c.mu_b.back();
  if (c.final_mu_a > c.final_mu_b) {
    c.verdict = Verdict::a_more_condensed;
  } else if (c.final_mu_b > c.final_mu_a) {
    c.verdict = Verdict::b_more_condensed;
  } else {
    c.verdict = Verdict::tie;
  }
  return c;
}

ojson to_json(const CompareReport& c) {
  ojson layers = ojson::array();
  for (std::size_t l = 0; l < c.mu_a.size(); ++l) {
    layers.push_back(ojson{{"layer", l + 1}, {"mu_a", c.mu_a[l]}, {"mu_b", c.mu_b[l]}, {"delta_mu", c.delta_mu[l]}});
  }
  return ojson{{"schema", kCompareSchema},
               {"schema_version", kReportSchemaVersion},
               {"layers", std::move(layers)},
               {"delta_rho", optional_number(c.delta_rho)},
               {"delta_tau", optional_number(c.delta_tau)},
               {"final_mu_a", c.final_mu_a},
               {"final_mu_b", c.final_mu_b},
               {"verdict", std::string(to_string(c.verdict))}};
}

ojson to_json(const CheckRecord& c) {
  return ojson{{"check", c.name},   {"params", c.params}, {"estimate", c.estimate},
               {"stderr", c.stderr_}, {"lower", c.lower},   {"upper", c.upper},
               {"status", std::string(to_string(c.status))}, {"note", c.note}};
}

}  // namespace condense
