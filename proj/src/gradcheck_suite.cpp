#include "condense/gradcheck_suite.hpp"

#include <functional>

#include "condense/gradcheck.hpp"
#include "condense/losses.hpp"
#include "condense/model.hpp"
#include "condense/rng.hpp"

namespace condense {

namespace {

using GraphFn = std::function<Var<double>(Graph<double>&, Var<double>)>;

TensorD random_normal(const Shape& shape, Rng& rng, double sd = 1.0) {
  TensorD t(shape);
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

GradcheckCase check(std::string name, const TensorD& x, const GraphFn& fn, double tolerance) {
  Graph<double> g;
  const Var<double> leaf = g.param(x);
  g.backward(fn(g, leaf));
  const TensorD analytic = g.grad(leaf);
  const TensorD numeric = finite_difference_gradient(
      [&](const TensorD& probe) {
        Graph<double> h;
        return fn(h, h.constant(probe)).value().item();
      },
      x);
  GradcheckCase c;
  c.name = std::move(name);
  c.shape = shape_to_string(x.shape());
  c.coordinates = x.size();
  c.rel_error = relative_error(analytic, numeric);
  c.passed = c.rel_error < tolerance;
  return c;
}

// All parameters of a small model flattened into one vector.
GradcheckCase transformer_probe(std::uint64_t seed, double tolerance) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.vocab_size = 8;
  cfg.context_len = 8;
  const Params<double> base = init_params(cfg, seed).cast<double>();
  std::vector<Shape> shapes;
  std::size_t total = 0;
  for (const auto& t : base.tensors) {
    shapes.push_back(t.shape());
    total += t.size();
  }
  // Init scale 0.02 leaves the loss nearly flat; widen it so every term matters.
  Rng rng(derive_seed(seed, 7));
  TensorD flat(Shape{total});
  for (double& v : flat.data()) v = 0.3 * rng.normal();

  const std::size_t batch = 2, seq = 6;
  std::vector<std::size_t> inputs, targets;
  for (std::size_t i = 0; i < batch * seq; ++i) {
    inputs.push_back(rng.below(cfg.vocab_size));
    targets.push_back(rng.below(cfg.vocab_size));
  }
  LossConfig loss;
  loss.lambda_disp = 0.1;

  const GraphFn fn = [&](Graph<double>&, Var<double> theta) {
    std::vector<Var<double>> weights;
    std::size_t off = 0;
    for (const auto& s : shapes) {
      const std::size_t n = shape_numel(s);
      weights.push_back(reshape(slice_last(theta, off, n), s));
      off += n;
    }
    const auto pass = forward<double>(cfg, weights, inputs, batch, seq);
    const std::span<const Var<double>> blocks(pass.layers.begin() + 1, pass.layers.end());
    return combined_objective(cross_entropy(pass.logits, targets), blocks, loss);
  };
  return check("transformer", flat, fn, tolerance);
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  const TensorD z = random_normal(Shape{8, 16}, rng);
  const TensorD teacher = random_normal(Shape{4, 8}, rng, 2.0);
  const TensorD student = random_normal(Shape{4, 8}, rng, 2.0);
  const double eps = 1e-6;

  std::vector<GradcheckCase> out;
  out.push_back(check("dispersion", z, [&](auto&, Var<double> v) { return dispersion_loss(v, 1.0, eps); },
                      tolerance));
  out.push_back(check("dispersion_tau0.5", z,
                      [&](auto&, Var<double> v) { return dispersion_loss(v, 0.5, eps); }, tolerance));
  out.push_back(check("decorrelation", z,
                      [](auto&, Var<double> v) { return decorrelation_loss(v, CovarianceDivisor::dim_minus_one); },
                      tolerance));
  out.push_back(check("decorrelation_n_minus_one", z,
                      [](auto&, Var<double> v) {
                        return decorrelation_loss(v, CovarianceDivisor::tokens_minus_one);
                      },
                      tolerance));
  out.push_back(check("l2_repel", z, [](auto&, Var<double> v) { return l2_repel_loss(v, 8.0, 0.01); },
                      tolerance));
  out.push_back(check("orthogonalization", z,
                      [&](auto&, Var<double> v) { return orthogonalization_loss(v, eps); }, tolerance));
  out.push_back(check("kd_student", student,
                      [&](Graph<double>& g, Var<double> v) { return kd_loss(g.constant(teacher), v, 2.0); },
                      tolerance));
  out.push_back(check("kd_teacher", teacher,
                      [&](Graph<double>& g, Var<double> v) { return kd_loss(v, g.constant(student), 2.0); },
                      tolerance));
  out.push_back(transformer_probe(derive_seed(seed, 3), tolerance));
  return out;
}

}  // namespace condense
