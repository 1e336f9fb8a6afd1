#pragma once

#include <cmath>
#include <functional>

#include "condense/gradcheck.hpp"
#include "condense/graph.hpp"
#include "condense/rng.hpp"
#include "condense/tensor.hpp"

namespace condense::testing {

inline TensorD uniform(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  TensorD t(shape);
  for (double& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline TensorD normal(const Shape& shape, Rng& rng, double sd = 1.0) {
  TensorD t(shape);
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

using UnaryGraphFn = std::function<Var<double>(Graph<double>&, Var<double>)>;

/// Autodiff vs central differences of f at x, norm-wise relative error.
inline double grad_error(const TensorD& x, const UnaryGraphFn& f) {
  Graph<double> g;
  const auto leaf = g.param(x);
  g.backward(f(g, leaf));
  const TensorD analytic = g.grad(leaf);
  const TensorD numeric = finite_difference_gradient(
      [&](const TensorD& p) {
        Graph<double> h;
        return f(h, h.constant(p)).value().item();
      },
      x);
  return relative_error(analytic, numeric);
}

/// Scalar root sum(w * y) with fixed random weights, so every output entry matters.
inline Var<double> weighted_sum(Graph<double>& g, Var<double> y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum_all(mul(y, g.constant(normal(y.shape(), rng))));
}

}  // namespace condense::testing
