#include "condense/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "condense/rng.hpp"

namespace condense {

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("model.n_layers must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0) {
    throw std::invalid_argument("model.d_model must be divisible by model.n_heads");
  }
  if (d_ff < 1) throw std::invalid_argument("model.d_ff must be >= 1");
  if (context_len < 2) throw std::invalid_argument("model.context_len must be >= 2");
  if (vocab_size < 2) throw std::invalid_argument("model.vocab_size must be >= 2");
  if (!(norm_eps > 0.0)) throw std::invalid_argument("model.norm_eps must be > 0");
}

template <typename T>
std::size_t Params<T>::index_of(std::string_view name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - names.begin());
}

template <typename T>
std::size_t Params<T>::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

template struct Params<float>;
template struct Params<double>;

std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("wte", Shape{cfg.vocab_size, d});
  out.emplace_back("wpe", Shape{cfg.context_len, d});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.g", Shape{d});
    out.emplace_back(p + "ln1.b", Shape{d});
    out.emplace_back(p + "attn.wq", Shape{d, d});
    out.emplace_back(p + "attn.bq", Shape{d});
    out.emplace_back(p + "attn.wk", Shape{d, d});
    out.emplace_back(p + "attn.bk", Shape{d});
    out.emplace_back(p + "attn.wv", Shape{d, d});
    out.emplace_back(p + "attn.bv", Shape{d});
    out.emplace_back(p + "attn.wo", Shape{d, d});
    out.emplace_back(p + "attn.bo", Shape{d});
    out.emplace_back(p + "ln2.g", Shape{d});
    out.emplace_back(p + "ln2.b", Shape{d});
    out.emplace_back(p + "mlp.w1", Shape{d, f});
    out.emplace_back(p + "mlp.b1", Shape{f});
    out.emplace_back(p + "mlp.w2", Shape{f, d});
    out.emplace_back(p + "mlp.b2", Shape{d});
  }
  out.emplace_back("lnf.g", Shape{d});
  out.emplace_back("lnf.b", Shape{d});
  return out;
}

bool is_decayed(std::string_view name) {
  const auto dot = name.rfind('.');
  const auto leaf = dot == std::string_view::npos ? name : name.substr(dot + 1);
  return leaf.starts_with('w');
}

Params<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  Params<float> p;
  for (auto& [name, shape] : param_layout(cfg)) {
    Tensor<float> t(shape);
    if (name.ends_with(".g")) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else if (is_decayed(name)) {
      const bool residual = name.ends_with("attn.wo") || name.ends_with("mlp.w2");
      const double stddev = 0.02 * (residual ? residual_scale : 1.0);
      for (auto& v : t.data()) v = static_cast<float>(stddev * rng.normal());
    }
    p.names.push_back(name);
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <typename T>
ForwardPass<T> forward(const ModelConfig& cfg, std::span<const Var<T>> weights,
                       std::span<const std::size_t> tokens, std::size_t batch, std::size_t seq) {
  if (tokens.size() != batch * seq) throw ShapeError("forward (tokens)", {Shape{tokens.size()}, Shape{batch, seq}});
  if (seq > cfg.context_len) {
    throw std::invalid_argument("sequence length " + std::to_string(seq) + " exceeds context " +
                                std::to_string(cfg.context_len));
  }
  const auto layout = param_layout(cfg);
  if (weights.size() != layout.size()) throw std::invalid_argument("forward: parameter count mismatch");
  std::size_t cursor = 0;
  auto next = [&]() { return weights[cursor++]; };

  const T eps = static_cast<T>(cfg.norm_eps);
  const std::size_t hd = cfg.head_dim();
  const T att_scale = T{1} / std::sqrt(static_cast<T>(hd));
  auto affine = [](Var<T> x, Var<T> w, Var<T> b) { return add(matmul(x, w), b); };
  auto norm = [&](Var<T> x, Var<T> g, Var<T> b) { return add(mul(layer_norm(x, eps), g), b); };

  Var<T> wte = next();
  Var<T> wpe = next();
  std::vector<std::size_t> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = i;

  ForwardPass<T> out;
  Var<T> x = add(embedding(wte, tokens, Shape{batch, seq}), embedding(wpe, positions, Shape{seq}));
  out.layers.push_back(x);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto ln1g = next(), ln1b = next();
    auto wq = next(), bq = next(), wk = next(), bk = next(), wv = next(), bv = next();
    auto wo = next(), bo = next();
    auto ln2g = next(), ln2b = next();
    auto w1 = next(), b1 = next(), w2 = next(), b2 = next();

    auto h = norm(x, ln1g, ln1b);
    auto q = affine(h, wq, bq);
    auto k = affine(h, wk, bk);
    auto v = affine(h, wv, bv);
    std::vector<Var<T>> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t head = 0; head < cfg.n_heads; ++head) {
      auto qh = slice_last(q, head * hd, hd);
      auto kh = slice_last(k, head * hd, hd);
      auto vh = slice_last(v, head * hd, hd);
      auto att = softmax(scale(matmul(qh, transpose(kh)), att_scale), /*causal=*/true);
      heads.push_back(matmul(att, vh));
    }
    x = add(x, affine(concat(std::span<const Var<T>>(heads)), wo, bo));
    auto h2 = norm(x, ln2g, ln2b);
    x = add(x, affine(gelu(affine(h2, w1, b1)), w2, b2));
    out.layers.push_back(x);
  }
  auto lnfg = next(), lnfb = next();
  out.final_norm = norm(x, lnfg, lnfb);
  out.logits = matmul(out.final_norm, transpose(wte));
  return out;
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets) {
  return mean_all(sub(logsumexp(logits, -1), pick(logits, targets)));
}

TracedForward forward_with_trace(const ModelConfig& cfg, const Params<float>& params,
                                 std::span<const std::size_t> tokens, std::string sequence_id) {
  const std::size_t n = tokens.size();
  if (n == 0) throw std::invalid_argument("forward_with_trace: empty token sequence");
  Graph<float> g;
  std::vector<Var<float>> w;
  for (const auto& t : params.tensors) w.push_back(g.constant(t));
  auto pass = forward<float>(cfg, w, tokens, 1, n);
  TracedForward r;
  r.logits = pass.logits.value().reshaped(Shape{n, cfg.vocab_size});
  r.trace.sequence_id = std::move(sequence_id);
  for (auto layer : pass.layers) r.trace.layers.push_back(layer.value().reshaped(Shape{n, cfg.d_model}));
  r.trace.final_norm = pass.final_norm.value().reshaped(Shape{n, cfg.d_model});
  return r;
}

template ForwardPass<float> forward(const ModelConfig&, std::span<const Var<float>>,
                                    std::span<const std::size_t>, std::size_t, std::size_t);
template ForwardPass<double> forward(const ModelConfig&, std::span<const Var<double>>,
                                     std::span<const std::size_t>, std::size_t, std::size_t);
template Var<float> cross_entropy(Var<float>, std::span<const std::size_t>);
template Var<double> cross_entropy(Var<double>, std::span<const std::size_t>);

}  // namespace condense
