#include <doctest.h>

#include <cmath>
#include <numeric>

#include "condense/corpus.hpp"
#include "condense/errors.hpp"
#include "condense/model.hpp"
#include "condense/train.hpp"

using namespace condense;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.n_layers = 2;
  m.d_model = 16;
  m.n_heads = 2;
  m.d_ff = 32;
  m.context_len = 16;
  return m;
}

std::vector<std::size_t> bytes_of(const std::string& s) {
  std::vector<std::size_t> out;
  for (unsigned char c : s) out.push_back(c);
  return out;
}

double stddev(std::span<const float> v) {
  double mean = 0.0, sq = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (float x : v) sq += (x - mean) * (x - mean);
  return std::sqrt(sq / static_cast<double>(v.size()));
}

}  // namespace

TEST_CASE("init follows the documented scales") {
  ModelConfig m;  // default 4-layer, d=64
  const auto p = init_params(m, 7);
  CHECK(stddev(p["wte"].data()) == doctest::Approx(0.02).epsilon(0.02));
  CHECK(stddev(p["h0.mlp.w1"].data()) == doctest::Approx(0.02).epsilon(0.05));
  CHECK(stddev(p["h0.attn.wo"].data()) == doctest::Approx(0.02 / std::sqrt(8.0)).epsilon(0.05));
  for (float v : p["h1.ln2.g"].data()) CHECK(v == 1.0f);
  for (float v : p["h3.mlp.b1"].data()) CHECK(v == 0.0f);
  CHECK(init_params(m, 7) == p);
  CHECK_FALSE(init_params(m, 8) == p);
  CHECK(is_decayed("h2.attn.wq"));
  CHECK(is_decayed("wte"));
  CHECK_FALSE(is_decayed("h2.attn.bq"));
  CHECK_FALSE(is_decayed("lnf.g"));
}

TEST_CASE("traced forward has L+1 layer outputs and a final-norm output") {
  const auto m = tiny_model();
  const auto p = init_params(m, 1);
  const auto tokens = bytes_of("hello, world!");
  const auto out = forward_with_trace(m, p, tokens, "s0");
  CHECK(out.logits.shape() == Shape{tokens.size(), kByteVocab});
  REQUIRE(out.trace.layers.size() == m.n_layers + 1);
  for (const auto& l : out.trace.layers) CHECK(l.shape() == Shape{tokens.size(), m.d_model});
  REQUIRE(out.trace.final_norm.has_value());
  CHECK(out.trace.final_norm->shape() == Shape{tokens.size(), m.d_model});
  CHECK(out.trace.sequence_id == "s0");
  CHECK(forward_with_trace(m, p, tokens, "s0").logits == out.logits);
}

TEST_CASE("attention is causal") {
  const auto m = tiny_model();
  const auto p = init_params(m, 2);
  auto tokens = bytes_of("abcdefghijkl");
  const auto base = forward_with_trace(m, p, tokens).logits;
  tokens[7] = 'Z';
  const auto changed = forward_with_trace(m, p, tokens).logits;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    double diff = 0.0;
    for (std::size_t v = 0; v < kByteVocab; ++v) diff = std::max(diff, std::abs(double(base.at(i, v)) - changed.at(i, v)));
    if (i < 7) {
      CHECK(diff == 0.0);
    } else {
      CHECK(diff > 0.0);
    }
  }
}

TEST_CASE("zeroed token embedding gives uniform predictions") {
  const auto m = tiny_model();
  auto p = init_params(m, 3);
  std::fill(p["wte"].data().begin(), p["wte"].data().end(), 0.0f);
  TrainState s;
  s.model = m;
  s.params = p;
  for (const auto& t : p.tensors) {
    s.adam_m.emplace_back(t.shape());
    s.adam_v.emplace_back(t.shape());
  }
  TokenBatch b{2, 8, {}};
  for (std::size_t i = 0; i < 18; ++i) b.windows.push_back(97 + i % 7);
  TrainConfig cfg;
  cfg.loss.lambda_disp = 0.0;
  const auto metrics = train_step(s, b, cfg);
  CHECK(metrics.ce == doctest::Approx(std::log(257.0)).epsilon(1e-5));
  CHECK(metrics.total == metrics.ce);
}

TEST_CASE("lambda 0 total equals cross-entropy, lambda > 0 adds the scaled family loss") {
  const auto m = tiny_model();
  TokenBatch b{2, 8, {}};
  for (std::size_t i = 0; i < 18; ++i) b.windows.push_back((i * 37) % 256);
  TrainConfig cfg;
  cfg.loss.lambda_disp = 0.0;
  auto s0 = TrainState::fresh(m, 4);
  const auto a = train_step(s0, b, cfg);
  CHECK(a.total == a.ce);
  cfg.loss.lambda_disp = 0.1;
  auto s1 = TrainState::fresh(m, 4);
  const auto c = train_step(s1, b, cfg);
  CHECK(c.ce == a.ce);
  CHECK(c.total == doctest::Approx(c.ce + 0.1 * c.disp).epsilon(1e-6));
  CHECK(c.disp < 0.0);
  CHECK(s1.step == 1);
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  cfg.steps = 1000;
  cfg.warmup_steps = 100;
  cfg.lr = 1e-3;
  CHECK(learning_rate(cfg, 0) == doctest::Approx(1e-5));
  CHECK(learning_rate(cfg, 99) == doctest::Approx(1e-3));
  CHECK(learning_rate(cfg, 100) == doctest::Approx(1e-3));
  CHECK(learning_rate(cfg, 550) == doctest::Approx(0.55e-3));
  CHECK(learning_rate(cfg, 1000) == doctest::Approx(1e-4));
  cfg.schedule = LrSchedule::constant;
  CHECK(learning_rate(cfg, 700) == 1e-3);
}

TEST_CASE("one fixed batch is memorized") {
  ModelConfig m = tiny_model();
  m.d_model = 32;
  m.d_ff = 64;
  m.context_len = 64;
  TrainConfig cfg;
  cfg.loss.lambda_disp = 0.0;
  cfg.lr = 3e-3;
  cfg.warmup_steps = 20;
  cfg.steps = 500;
  cfg.weight_decay = 0.0;
  const auto text = synthetic_corpus(65, 11);
  TokenBatch b{1, 64, bytes_of(text)};
  auto s = TrainState::fresh(m, 5);
  double last = 0.0;
  std::size_t done = 0;
  for (; done < cfg.steps; ++done) {
    last = train_step(s, b, cfg).ce;
    if (last < 0.1 * std::log(257.0)) break;
  }
  INFO("steps ", done, " ce ", last);
  CHECK(last < 0.1 * std::log(257.0));
}

TEST_CASE("training runs are deterministic and zero steps only snapshots init") {
  const auto m = tiny_model();
  const auto corpus = bytes_of(synthetic_corpus(4000, 3));
  TraceSampling sampling{4, 16, 5};
  TrainConfig cfg;
  cfg.steps = 12;
  cfg.batch_size = 2;
  cfg.warmup_steps = 3;
  const auto a = run_training(cfg, m, corpus, sampling);
  const auto b = run_training(cfg, m, corpus, sampling);
  CHECK(a.checkpoint == b.checkpoint);
  CHECK(a.checkpoint.log.steps.size() == 12);
  CHECK(a.checkpoint.log.snapshots.size() == 4);  // 0, 5, 10, 12
  CHECK(a.checkpoint.log.snapshots.back().step == 12);
  CHECK(a.final_traces.size() == 4);
  for (const auto& s : a.checkpoint.log.steps) CHECK(std::isfinite(s.total));

  cfg.seed = 1;
  CHECK_FALSE(run_training(cfg, m, corpus, sampling).checkpoint == a.checkpoint);

  cfg.steps = 0;
  const auto z = run_training(cfg, m, corpus, sampling);
  CHECK(z.checkpoint.log.steps.empty());
  CHECK(z.checkpoint.log.snapshots.size() == 1);
  CHECK(z.checkpoint.state.params == init_params(m, 1));
}

TEST_CASE("resuming keeps the weights and restarts the optimizer") {
  const auto m = tiny_model();
  const auto corpus = bytes_of(synthetic_corpus(4000, 3));
  TraceSampling sampling{4, 16, 0};
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 2;
  const auto first = run_training(cfg, m, corpus, sampling);
  cfg.steps = 0;
  const auto resumed = run_training(cfg, m, corpus, sampling, first.checkpoint.state);
  CHECK(resumed.checkpoint.state.params == first.checkpoint.state.params);
  CHECK(resumed.checkpoint.state.step == 0);
}

TEST_CASE("corpus and batch sampling") {
  std::vector<std::size_t> corpus(100);
  std::iota(corpus.begin(), corpus.end(), 0);
  const auto split = split_corpus(corpus, TraceSampling{3, 10, 0}, 20);
  CHECK(split.train.size() == 70);
  REQUIRE(split.held_out.size() == 3);
  CHECK(split.held_out[0].front() == 70);
  CHECK(split.held_out[2].back() == 99);
  CHECK_THROWS_AS(split_corpus(corpus, TraceSampling{3, 10, 0}, 71), DataError);

  const auto b1 = sample_batch(split.train, 4, 8, 9, 3);
  const auto b2 = sample_batch(split.train, 4, 8, 9, 3);
  CHECK(b1.windows == b2.windows);
  CHECK(b1.windows.size() == 4 * 9);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 1; j < 9; ++j) CHECK(b1.windows[r * 9 + j] == b1.windows[r * 9 + j - 1] + 1);
  CHECK_FALSE(sample_batch(split.train, 4, 8, 9, 4).windows == b1.windows);
}

TEST_CASE("synthetic corpus is deterministic text of the requested size") {
  const auto a = synthetic_corpus(5000, 1);
  CHECK(a.size() == 5000);
  CHECK(a == synthetic_corpus(5000, 1));
  CHECK(a != synthetic_corpus(5000, 2));
  for (unsigned char c : a) CHECK((c == '\n' || (c >= 32 && c < 127)));
}
