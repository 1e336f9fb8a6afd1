#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "condense/commands.hpp"
#include "condense/corpus.hpp"
#include "condense/errors.hpp"
#include "condense/io.hpp"

namespace fs = std::filesystem;
using namespace condense;

namespace {

int code(ExitCode c) { return static_cast<int>(c); }

// Command-line overrides of RunConfig fields; unset flags keep the config file or defaults.
struct RunFlags {
  std::string config;
  std::optional<std::string> corpus, output_dir, init_checkpoint;
  std::optional<std::size_t> bins;

  std::optional<std::size_t> n_layers, d_model, n_heads, d_ff, vocab_size, context_len;
  std::optional<double> norm_eps;

  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch_size, warmup_steps;
  std::optional<double> lr, min_lr_ratio, beta1, beta2, adam_eps, weight_decay, grad_clip;
  std::optional<std::string> schedule;

  std::optional<std::string> loss, layer_aggregation, covariance_divisor;
  std::optional<double> tau, lambda_disp, lambda_norm, clamp_eps;

  std::optional<std::size_t> n_sequences, seq_len, snapshot_every;

  void add_to(CLI::App& app) {
    app.add_option("--config", config, "JSON run configuration (flags override it)");
    app.add_option("--corpus", corpus, "Training corpus (raw bytes)");
    app.add_option("--output-dir", output_dir, "Output directory (relative paths go under $CONDENSE_OUTPUT_ROOT)");
    app.add_option("--init-checkpoint", init_checkpoint, "Start from the weights of this checkpoint");
    app.add_option("--bins", bins, "Histogram bins");

    app.add_option("--n-layers", n_layers);
    app.add_option("--d-model", d_model);
    app.add_option("--n-heads", n_heads);
    app.add_option("--d-ff", d_ff);
    app.add_option("--vocab-size", vocab_size);
    app.add_option("--context-len", context_len);
    app.add_option("--norm-eps", norm_eps);

    app.add_option("--seed", seed);
    app.add_option("--steps", steps);
    app.add_option("--batch-size", batch_size);
    app.add_option("--lr", lr);
    app.add_option("--schedule", schedule, "cosine | linear | constant");
    app.add_option("--warmup-steps", warmup_steps);
    app.add_option("--min-lr-ratio", min_lr_ratio);
    app.add_option("--beta1", beta1);
    app.add_option("--beta2", beta2);
    app.add_option("--adam-eps", adam_eps);
    app.add_option("--weight-decay", weight_decay);
    app.add_option("--grad-clip", grad_clip);

    app.add_option("--loss", loss, "dispersion | decorrelation | l2_repel | orthogonalization");
    app.add_option("--tau", tau);
    app.add_option("--lambda-disp", lambda_disp);
    app.add_option("--lambda-norm", lambda_norm);
    app.add_option("--clamp-eps", clamp_eps);
    app.add_option("--layer-aggregation", layer_aggregation, "mean | sum");
    app.add_option("--covariance-divisor", covariance_divisor, "dim_minus_one | tokens_minus_one");

    app.add_option("--n-sequences", n_sequences, "Held-out trace sequences");
    app.add_option("--seq-len", seq_len, "Held-out sequence length");
    app.add_option("--snapshot-every", snapshot_every, "Steps between condensation snapshots (0: init and end only)");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
    auto set = [](auto& dst, const auto& src) {
      if (src) dst = *src;
    };
    set(c.corpus, corpus);
    set(c.output_dir, output_dir);
    set(c.init_checkpoint, init_checkpoint);
    set(c.bins, bins);
    set(c.model.n_layers, n_layers);
    set(c.model.d_model, d_model);
    set(c.model.n_heads, n_heads);
    set(c.model.d_ff, d_ff);
    set(c.model.vocab_size, vocab_size);
    set(c.model.context_len, context_len);
    set(c.model.norm_eps, norm_eps);
    set(c.train.seed, seed);
    set(c.train.steps, steps);
    set(c.train.batch_size, batch_size);
    set(c.train.warmup_steps, warmup_steps);
    set(c.train.lr, lr);
    set(c.train.min_lr_ratio, min_lr_ratio);
    set(c.train.beta1, beta1);
    set(c.train.beta2, beta2);
    set(c.train.adam_eps, adam_eps);
    set(c.train.weight_decay, weight_decay);
    set(c.train.grad_clip, grad_clip);
    auto& l = c.train.loss;
    set(l.tau, tau);
    set(l.lambda_disp, lambda_disp);
    set(l.lambda_norm, lambda_norm);
    set(l.clamp_eps, clamp_eps);
    set(c.traces.n_sequences, n_sequences);
    set(c.traces.seq_len, seq_len);
    set(c.traces.snapshot_every, snapshot_every);
    try {
      if (schedule) c.train.schedule = parse_schedule(*schedule);
      if (loss) l.kind = parse_loss_kind(*loss);
      if (layer_aggregation) l.layer_aggregation = parse_aggregation(*layer_aggregation);
      if (covariance_divisor) l.covariance_divisor = parse_divisor(*covariance_divisor);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    c.validate();
    return c;
  }
};

void print_summary(const CondensationSummary& s) {
  std::printf("sequences: %zu\nlayer 0 mu: %.6f\n", s.n_sequences, s.layer0_mu);
  for (std::size_t l = 0; l < s.mu.size(); ++l) std::printf("layer %zu mu: %.6f\n", l + 1, s.mu[l]);
  if (s.spearman_rho) std::printf("spearman rho: %.6f\n", *s.spearman_rho);
  else std::printf("spearman rho: undefined\n");
  if (s.kendall_tau) std::printf("kendall tau: %.6f\n", *s.kendall_tau);
  else std::printf("kendall tau: undefined\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding condensation lab: metrics, dispersion losses, tiny transformer, theory checks"};
  app.require_subcommand(1);

  RunFlags train_flags;
  bool train_print_config = false;
  auto* train = app.add_subcommand("train", "Train the tiny transformer and record condensation");
  train_flags.add_to(*train);
  train->add_flag("--print-config", train_print_config, "Print the resolved configuration and exit");

  RunFlags print_flags;
  auto* print_config = app.add_subcommand("print-config", "Print the resolved run configuration with all defaults");
  print_flags.add_to(*print_config);

  std::vector<std::string> analyze_paths;
  std::size_t analyze_bins = kDefaultBins;
  std::string analyze_out = "analysis";
  auto* analyze = app.add_subcommand("analyze", "Condensation metrics of trace files");
  analyze->add_option("traces", analyze_paths, "Trace files (.emtr)")->required();
  analyze->add_option("--bins", analyze_bins, "Histogram bins");
  analyze->add_option("--output-dir", analyze_out, "Output directory");

  std::string report_a, report_b, compare_out = "compare";
  auto* compare = app.add_subcommand("compare", "Per-layer deltas between two analysis reports (b - a)");
  compare->add_option("report_a", report_a)->required();
  compare->add_option("report_b", report_b)->required();
  compare->add_option("--output-dir", compare_out, "Output directory");

  TheoryGrid grid;
  std::string verify_out = "verify";
  auto* verify = app.add_subcommand("verify-theory", "Monte-Carlo checks of the dimension-padding results");
  verify->add_option("--trials", grid.trials, "Monte-Carlo trials per estimate");
  verify->add_option("--seed", grid.seed);
  verify->add_option("--radii", grid.radii, "Norms r of the alpha grid");
  verify->add_option("--pads", grid.pads, "Padding dimensions m of the alpha grid");
  verify->add_option("--repeat-pairs", grid.repeat_pairs);
  verify->add_option("--output-dir", verify_out, "Output directory");

  std::uint64_t gradcheck_seed = 0;
  std::string gradcheck_out = "gradcheck";
  auto* gradcheck = app.add_subcommand("gradcheck", "Autodiff vs central finite differences for all losses and the model");
  gradcheck->add_option("--seed", gradcheck_seed);
  gradcheck->add_option("--output-dir", gradcheck_out, "Output directory");

  std::size_t corpus_bytes = std::size_t{1} << 20;
  std::uint64_t corpus_seed = 0;
  std::string corpus_path;
  auto* make_corpus = app.add_subcommand("make-corpus", "Write a deterministic synthetic text corpus");
  make_corpus->add_option("path", corpus_path)->required();
  make_corpus->add_option("--bytes", corpus_bytes, "Size in bytes");
  make_corpus->add_option("--seed", corpus_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? code(ExitCode::success) : code(ExitCode::usage);
  }

  try {
    if (*print_config) {
      std::cout << dump(to_json(print_flags.resolve()));
      return code(ExitCode::success);
    }
    if (*train) {
      const RunConfig cfg = train_flags.resolve();
      if (train_print_config) {
        std::cout << dump(to_json(cfg));
        return code(ExitCode::success);
      }
      if (cfg.corpus.empty()) throw ConfigError("train: --corpus is required");
      const fs::path out = resolve_output_dir(cfg.output_dir);
      const AnalysisReport r = cmd_train(cfg, out);
      print_summary(r.summary);
      std::printf("wrote %s\n", out.string().c_str());
      return code(ExitCode::success);
    }
    if (*analyze) {
      std::vector<fs::path> paths(analyze_paths.begin(), analyze_paths.end());
      const fs::path out = resolve_output_dir(analyze_out);
      print_summary(cmd_analyze(paths, analyze_bins, out).summary);
      std::printf("wrote %s\n", out.string().c_str());
      return code(ExitCode::success);
    }
    if (*compare) {
      const fs::path out = resolve_output_dir(compare_out);
      const CompareReport c = cmd_compare(report_a, report_b, out);
      for (std::size_t l = 0; l < c.delta_mu.size(); ++l) {
        std::printf("layer %zu: mu_a %.6f mu_b %.6f delta %+.6f\n", l + 1, c.mu_a[l], c.mu_b[l], c.delta_mu[l]);
      }
      std::printf("verdict: %s\n", std::string(to_string(c.verdict)).c_str());
      return code(ExitCode::success);
    }
    if (*verify) {
      const fs::path out = resolve_output_dir(verify_out);
      const VerifyReport r = cmd_verify_theory(grid, out);
      for (const auto& c : r.checks) {
        std::printf("%-13s %-40s estimate %.6g stderr %.2g bounds (%.6g, %.6g)%s%s\n",
                    std::string(to_string(c.status)).c_str(), (c.name + " " + c.params).c_str(), c.estimate,
                    c.stderr_, c.lower, c.upper, c.note.empty() ? "" : "  ", c.note.c_str());
      }
      return code(r.any_failed() ? ExitCode::verification : ExitCode::success);
    }
    if (*gradcheck) {
      const fs::path out = resolve_output_dir(gradcheck_out);
      const auto cases = cmd_gradcheck(gradcheck_seed, out);
      bool ok = true;
      for (const auto& c : cases) {
        std::printf("%-4s %-26s %-10s rel_error %.3e\n", c.passed ? "pass" : "FAIL", c.name.c_str(), c.shape.c_str(),
                    c.rel_error);
        ok = ok && c.passed;
      }
      return code(ok ? ExitCode::success : ExitCode::verification);
    }
    if (*make_corpus) {
      write_file_atomic(corpus_path, synthetic_corpus(corpus_bytes, corpus_seed));
      std::printf("wrote %zu bytes to %s\n", corpus_bytes, corpus_path.c_str());
      return code(ExitCode::success);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return code(ExitCode::usage);
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return code(ExitCode::data);
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return code(ExitCode::data);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return code(ExitCode::usage);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return code(ExitCode::data);
  }
  return code(ExitCode::usage);
}
