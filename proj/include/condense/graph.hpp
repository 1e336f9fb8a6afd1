#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condense/tensor.hpp"

namespace condense {

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Tape of primitive applications in topological (creation) order.
///
/// Leaves are created with param() (gradient tracked) or constant(). Every
/// primitive appends one node whose inputs were created before it, so the
/// tape is acyclic by construction and backward is a single reverse sweep.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t node, const Tensor<T>& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> param(Tensor<T> value, std::string_view label = "param");
  Var<T> constant(Tensor<T> value);

  /// Appends a primitive node. `backward` may be empty when no input needs a gradient.
  Var<T> record(std::string_view primitive, Tensor<T> value, std::vector<std::size_t> inputs,
                BackwardFn backward);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  const std::string& primitive(std::size_t id) const { return nodes_[id].primitive; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root. Gradients from earlier calls are cleared.
  void backward(Var<T> root);

  /// d root / d v. Zero tensor when v received no gradient (detached or unused).
  Tensor<T> grad(Var<T> v) const;

  /// Called by primitives' backward functions.
  void accumulate(std::size_t id, const Tensor<T>& g);
  void accumulate(std::size_t id, Tensor<T>&& g);

 private:
  struct Node {
    std::string primitive;
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops accept equal shapes, a rank-0 scalar on
// either side, or one operand whose shape is a trailing suffix of the other
// (leading-batch broadcast). Axis arguments may be negative (counted from the
// back).

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T factor);
template <typename T> Var<T> add_scalar(Var<T> x, T c);

/// a: [..., n, k]; b: [k, m] (shared) or [..., k, m] (same leading dims).
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Swaps the last two axes.
template <typename T> Var<T> transpose(Var<T> x);

template <typename T> Var<T> exp(Var<T> x);
template <typename T> Var<T> log(Var<T> x);
template <typename T> Var<T> sqrt(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
/// Input must lie in [-1, 1]; the gradient additionally requires |x| < 1.
template <typename T> Var<T> arccos(Var<T> x);
template <typename T> Var<T> clamp(Var<T> x, T lo, T hi);
/// max(x, c) with subgradient 0 where x == c.
template <typename T> Var<T> maximum(Var<T> x, T c);

template <typename T> Var<T> sum(Var<T> x, int axis);
template <typename T> Var<T> mean(Var<T> x, int axis);
template <typename T> Var<T> sum_all(Var<T> x);
template <typename T> Var<T> mean_all(Var<T> x);
template <typename T> Var<T> logsumexp(Var<T> x, int axis);

/// Softmax over the last axis. With `causal`, x is [..., N, N] and entries
/// above the diagonal are excluded (output 0).
template <typename T> Var<T> softmax(Var<T> x, bool causal = false);
/// Zero-mean, unit-variance normalization over the last axis; eps guards the variance.
template <typename T> Var<T> layer_norm(Var<T> x, T eps);
/// Tanh-approximation GELU.
template <typename T> Var<T> gelu(Var<T> x);

/// Rows of table [V, d] selected by ids; output shape ids_shape + [d].
template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::size_t> ids, const Shape& ids_shape);
/// Element `index[r]` of each last-axis row of x [..., V]; output [...].
template <typename T> Var<T> pick(Var<T> x, std::span<const std::size_t> index);
/// Concatenates along the last axis; leading shapes must match.
template <typename T> Var<T> concat(std::span<const Var<T>> parts);
template <typename T> Var<T> slice_last(Var<T> x, std::size_t start, std::size_t length);
/// [..., n] -> [..., n, k] by repeating each element k times.
template <typename T> Var<T> repeat_last(Var<T> x, std::size_t k);
/// [..., N, N] -> [..., N(N-1)], off-diagonal entries in row-major order.
template <typename T> Var<T> offdiag(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

/// Tensor-level entry point by primitive name, evaluating on a private graph.
/// Names: add sub mul div matmul transpose exp log sqrt square arccos clamp
/// sum mean max softmax layer_norm gelu concat logsumexp offdiag.
struct PrimitiveArgs {
  int axis = -1;
  double lo = -1.0;
  double hi = 1.0;
  double constant = 0.0;
  double eps = 1e-5;
  bool causal = false;
};

template <typename T>
Tensor<T> evaluate_primitive(std::string_view name, std::span<const Tensor<T>> inputs,
                             const PrimitiveArgs& args = {});

}  // namespace condense
