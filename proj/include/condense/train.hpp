#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "condense/geometry.hpp"
#include "condense/losses.hpp"
#include "condense/model.hpp"

namespace condense {

enum class LrSchedule { cosine, linear, constant };
std::string_view to_string(LrSchedule s);
LrSchedule parse_schedule(std::string_view s);

/// Optimization settings. The optimizer is Adam with decoupled weight decay
/// applied to matrix parameters only.
struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  LrSchedule schedule = LrSchedule::cosine;
  std::size_t warmup_steps = 200;
  double min_lr_ratio = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  LossConfig loss;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Learning rate applied at 0-based `step`.
double learning_rate(const TrainConfig& cfg, std::size_t step);

struct StepMetrics {
  std::size_t step = 0;
  double ce = 0.0;
  double disp = 0.0;   // aggregated family loss over block outputs
  double total = 0.0;  // ce + lambda_disp * disp
  double grad_norm = 0.0;
  double lr = 0.0;
  bool operator==(const StepMetrics&) const = default;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t step, StepMetrics snapshot, const std::string& what)
      : std::runtime_error(what), step_(step), snapshot_(snapshot) {}
  std::size_t step() const { return step_; }
  const StepMetrics& snapshot() const { return snapshot_; }

 private:
  std::size_t step_;
  StepMetrics snapshot_;
};

struct TrainState {
  ModelConfig model;
  Params<float> params;
  std::vector<TensorF> adam_m;
  std::vector<TensorF> adam_v;
  std::size_t step = 0;

  static TrainState fresh(const ModelConfig& model, std::uint64_t seed);
  bool operator==(const TrainState&) const = default;
};

/// A batch of equal-length token windows, each of length seq + 1 (inputs
/// plus the shifted next-token targets).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;  // model input length
  std::vector<std::size_t> windows;  // [batch, seq + 1]
};

/// One optimizer step on ce + lambda_disp * family loss over block outputs 1..L.
StepMetrics train_step(TrainState& state, const TokenBatch& batch, const TrainConfig& cfg);

struct Snapshot {
  std::size_t step = 0;
  CondensationSummary summary;
  bool operator==(const Snapshot&) const = default;
};

struct MetricLog {
  std::vector<StepMetrics> steps;
  std::vector<Snapshot> snapshots;
  bool operator==(const MetricLog&) const = default;
};

struct Checkpoint {
  TrainConfig train;
  TrainState state;
  MetricLog log;
  bool operator==(const Checkpoint&) const = default;
};

/// Held-out trace sampling: the last n_sequences * seq_len corpus tokens,
/// cut into consecutive windows. Fixed regardless of seed.
struct TraceSampling {
  std::size_t n_sequences = 100;
  std::size_t seq_len = 128;
  std::size_t snapshot_every = 500;  // 0: only initial and final snapshots
};

struct CorpusSplit {
  std::span<const std::size_t> train;
  std::vector<std::vector<std::size_t>> held_out;
};

CorpusSplit split_corpus(std::span<const std::size_t> corpus, const TraceSampling& sampling,
                         std::size_t min_train_tokens);

/// Traces of the held-out sequences under the current parameters.
std::vector<EmbeddingTrace> held_out_traces(const ModelConfig& model, const Params<float>& params,
                                            const std::vector<std::vector<std::size_t>>& held_out);

/// Random training windows; deterministic in (seed, step).
TokenBatch sample_batch(std::span<const std::size_t> train, std::size_t batch, std::size_t seq,
                        std::uint64_t seed, std::size_t step);

struct TrainingRun {
  Checkpoint checkpoint;
  std::vector<EmbeddingTrace> final_traces;
};

/// Trains for cfg.steps steps from a fresh init, or from the weights of
/// `resume` with a new optimizer state, recording per-step metrics and
/// periodic condensation snapshots of the held-out sequences.
TrainingRun run_training(const TrainConfig& cfg, const ModelConfig& model,
                         std::span<const std::size_t> corpus, const TraceSampling& sampling,
                         std::optional<TrainState> resume = std::nullopt);

}  // namespace condense
