#include "condense/train.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "condense/errors.hpp"
#include "condense/rng.hpp"

namespace condense {

std::string_view to_string(LrSchedule s) {
  switch (s) {
    case LrSchedule::cosine: return "cosine";
    case LrSchedule::linear: return "linear";
    case LrSchedule::constant: return "constant";
  }
  return "?";
}

LrSchedule parse_schedule(std::string_view s) {
  for (auto v : {LrSchedule::cosine, LrSchedule::linear, LrSchedule::constant}) {
    if (s == to_string(v)) return v;
  }
  throw std::invalid_argument("unknown lr schedule '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("train.lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) {
    throw std::invalid_argument("train.min_lr_ratio must be in [0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("train.beta1/beta2 must be in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw std::invalid_argument("train.adam_eps must be > 0");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw std::invalid_argument("train.grad_clip must be >= 0");
  loss.validate();
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const double floor = cfg.lr * cfg.min_lr_ratio;
  const std::size_t span = cfg.steps > cfg.warmup_steps ? cfg.steps - cfg.warmup_steps : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  switch (cfg.schedule) {
    case LrSchedule::cosine:
      return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
    case LrSchedule::linear:
      return floor + (cfg.lr - floor) * (1.0 - progress);
    case LrSchedule::constant:
      return cfg.lr;
  }
  return cfg.lr;
}

TrainState TrainState::fresh(const ModelConfig& model, std::uint64_t seed) {
  TrainState s;
  s.model = model;
  s.params = init_params(model, seed);
  for (const auto& t : s.params.tensors) {
    s.adam_m.emplace_back(t.shape());
    s.adam_v.emplace_back(t.shape());
  }
  return s;
}

StepMetrics train_step(TrainState& state, const TokenBatch& batch, const TrainConfig& cfg) {
  if (batch.seq < 1 || batch.windows.size() != batch.batch * (batch.seq + 1)) {
    throw std::invalid_argument("train_step: batch windows must be [batch, seq + 1] with seq >= 1");
  }
  std::vector<std::size_t> inputs, targets;
  inputs.reserve(batch.batch * batch.seq);
  targets.reserve(batch.batch * batch.seq);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const std::size_t* w = batch.windows.data() + b * (batch.seq + 1);
    inputs.insert(inputs.end(), w, w + batch.seq);
    targets.insert(targets.end(), w + 1, w + batch.seq + 1);
  }

  Graph<float> g;
  std::vector<Var<float>> weights;
  for (std::size_t i = 0; i < state.params.tensors.size(); ++i) {
    weights.push_back(g.param(state.params.tensors[i], state.params.names[i]));
  }
  const auto pass = forward<float>(state.model, weights, inputs, batch.batch, batch.seq);
  const Var<float> ce = cross_entropy(pass.logits, targets);

  StepMetrics m;
  m.step = state.step;
  m.lr = learning_rate(cfg, state.step);
  m.ce = ce.value().item();
  Var<float> total = ce;
  if (batch.seq >= 2) {
    const std::span<const Var<float>> blocks(pass.layers.begin() + 1, pass.layers.end());
    const Var<float> disp = aggregate_family_loss(blocks, cfg.loss);
    m.disp = disp.value().item();
    if (cfg.loss.lambda_disp != 0.0) {
      total = add(ce, scale(disp, static_cast<float>(cfg.loss.lambda_disp)));
    }
  } else if (cfg.loss.lambda_disp != 0.0) {
    throw std::invalid_argument("train_step: dispersion regularizer needs sequences of >= 2 tokens");
  }
  m.total = total.value().item();
  if (!std::isfinite(m.total) || !std::isfinite(m.ce) || !std::isfinite(m.disp)) {
    std::ostringstream os;
    os << "non-finite loss at step " << m.step << " (ce=" << m.ce << ", disp=" << m.disp
       << ", total=" << m.total << ")";
    throw TrainingError(m.step, m, os.str());
  }

  g.backward(total);
  std::vector<TensorF> grads;
  grads.reserve(weights.size());
  double sq = 0.0;
  for (auto w : weights) {
    grads.push_back(g.grad(w));
    for (float v : grads.back().data()) sq += static_cast<double>(v) * v;
  }
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.grad_norm)) {
    throw TrainingError(m.step, m, "non-finite gradient norm at step " + std::to_string(m.step));
  }
  const double clip = (cfg.grad_clip > 0.0 && m.grad_norm > cfg.grad_clip) ? cfg.grad_clip / m.grad_norm : 1.0;

  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto p = state.params.tensors[i].data();
    auto mo = state.adam_m[i].data();
    auto ve = state.adam_v[i].data();
    auto gr = grads[i].data();
    const bool decay = is_decayed(state.params.names[i]);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const float gk = static_cast<float>(gr[k] * clip);
      mo[k] = b1 * mo[k] + (1.0f - b1) * gk;
      ve[k] = b2 * ve[k] + (1.0f - b2) * gk * gk;
      const double mhat = mo[k] / bc1;
      const double vhat = ve[k] / bc2;
      double update = mhat / (std::sqrt(vhat) + cfg.adam_eps);
      if (decay) update += cfg.weight_decay * p[k];
      p[k] = static_cast<float>(p[k] - m.lr * update);
    }
  }
  ++state.step;
  return m;
}

CorpusSplit split_corpus(std::span<const std::size_t> corpus, const TraceSampling& sampling,
                         std::size_t min_train_tokens) {
  if (sampling.n_sequences < 1) throw std::invalid_argument("trace sampling: n_sequences must be >= 1");
  if (sampling.seq_len < 2) throw std::invalid_argument("trace sampling: seq_len must be >= 2");
  const std::size_t held = sampling.n_sequences * sampling.seq_len;
  if (corpus.size() < held + min_train_tokens) {
    throw DataError("corpus too small: " + std::to_string(corpus.size()) +
                                " tokens, need " + std::to_string(held + min_train_tokens));
  }
  CorpusSplit s;
  s.train = corpus.first(corpus.size() - held);
  for (std::size_t i = 0; i < sampling.n_sequences; ++i) {
    const auto w = corpus.subspan(s.train.size() + i * sampling.seq_len, sampling.seq_len);
    s.held_out.emplace_back(w.begin(), w.end());
  }
  return s;
}

std::vector<EmbeddingTrace> held_out_traces(const ModelConfig& model, const Params<float>& params,
                                            const std::vector<std::vector<std::size_t>>& held_out) {
  std::vector<EmbeddingTrace> traces;
  traces.reserve(held_out.size());
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    std::ostringstream id;
    id << "heldout-" << std::setw(4) << std::setfill('0') << i;
    traces.push_back(forward_with_trace(model, params, held_out[i], id.str()).trace);
  }
  return traces;
}

TokenBatch sample_batch(std::span<const std::size_t> train, std::size_t batch, std::size_t seq,
                        std::uint64_t seed, std::size_t step) {
  if (train.size() < seq + 1) throw DataError("corpus too small for one training window");
  Rng rng(derive_seed(seed, 1'000'000 + step));
  TokenBatch b{batch, seq, {}};
  b.windows.reserve(batch * (seq + 1));
  const std::size_t starts = train.size() - seq;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t off = rng.below(starts);
    b.windows.insert(b.windows.end(), train.begin() + static_cast<long>(off),
                     train.begin() + static_cast<long>(off + seq + 1));
  }
  return b;
}

TrainingRun run_training(const TrainConfig& cfg, const ModelConfig& model,
                         std::span<const std::size_t> corpus, const TraceSampling& sampling,
                         std::optional<TrainState> resume) {
  cfg.validate();
  model.validate();
  if (sampling.seq_len > model.context_len) {
    throw std::invalid_argument("trace seq_len exceeds model context_len");
  }
  const std::size_t seq = model.context_len;
  const auto split = split_corpus(corpus, sampling, cfg.batch_size * (seq + 1));

  TrainingRun run;
  Checkpoint& ck = run.checkpoint;
  ck.train = cfg;
  if (resume) {
    // Continued training starts a new optimization phase on the given weights.
    if (!(resume->model == model)) throw std::invalid_argument("resume checkpoint has a different model config");
    ck.state = TrainState::fresh(model, cfg.seed);
    ck.state.params = std::move(resume->params);
  } else {
    ck.state = TrainState::fresh(model, cfg.seed);
  }
  auto snapshot = [&] {
    run.final_traces = held_out_traces(model, ck.state.params, split.held_out);
    ck.log.snapshots.push_back(Snapshot{ck.state.step, condensation_summary(run.final_traces)});
  };

  snapshot();
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const TokenBatch batch = sample_batch(split.train, cfg.batch_size, seq, cfg.seed, i);
    ck.log.steps.push_back(train_step(ck.state, batch, cfg));
    const bool last = i + 1 == cfg.steps;
    if (!last && sampling.snapshot_every > 0 && (i + 1) % sampling.snapshot_every == 0) snapshot();
  }
  if (cfg.steps > 0) snapshot();
  return run;
}

}  // namespace condense
