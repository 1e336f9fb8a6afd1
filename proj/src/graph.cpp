#include "condense/graph.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace condense {

ShapeError::ShapeError(const std::string& primitive, const std::vector<Shape>& shapes)
    : std::invalid_argument([&] {
        std::ostringstream os;
        os << primitive << ": incompatible shapes";
        for (const auto& s : shapes) os << ' ' << shape_to_string(s);
        return os.str();
      }()),
      primitive_(primitive) {}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::param(Tensor<T> value, std::string_view label) {
  nodes_.push_back(Node{std::string(label), std::move(value), {}, {}, true});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, false});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::record(std::string_view primitive, Tensor<T> value,
                        std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  if (!needs) backward = nullptr;
  nodes_.push_back(
      Node{std::string(primitive), std::move(value), std::move(inputs), std::move(backward), needs});
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
void Graph<T>::backward(Var<T> root) {
  if (root.graph != this) throw std::invalid_argument("backward: root belongs to another graph");
  const auto& rv = nodes_[root.id].value;
  if (rv.size() != 1) throw ShapeError("backward (root must be scalar)", {rv.shape()});
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[root.id] = Tensor<T>(rv.shape(), T{1});
  for (std::size_t k = root.id + 1; k-- > 0;) {
    auto& node = nodes_[k];
    if (!grads_[k] || !node.backward) continue;
    // Interior gradients are released once propagated; leaves keep theirs.
    Tensor<T> g = std::move(*grads_[k]);
    grads_[k].reset();
    node.backward(*this, k, g);
  }
}

template <typename T>
Tensor<T> Graph<T>::grad(Var<T> v) const {
  if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
  return Tensor<T>(nodes_[v.id].value.shape(), T{0});
}

template <typename T>
void Graph<T>::accumulate(std::size_t id, Tensor<T>&& g) {
  if (!nodes_[id].requires_grad) return;
  auto& slot = grads_[id];
  if (!slot) {
    slot = std::move(g);
    return;
  }
  auto dst = slot->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void Graph<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  accumulate(id, Tensor<T>(g));
}

namespace {

std::size_t norm_axis(int axis, std::size_t rank, const char* prim, const Shape& shape) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError(prim, {shape});
  return static_cast<std::size_t>(a);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<long>(small.size()));
}

// Sum of a gradient laid out like `big` down to a tensor of `small_shape`
// (small is a trailing suffix of big, so indices wrap modulo its size).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& small_shape) {
  if (g.shape() == small_shape) return g;
  Tensor<T> out(small_shape);
  const std::size_t n = out.size();
  auto src = g.data();
  auto dst = out.data();
  for (std::size_t base = 0; base < src.size(); base += n)
    for (std::size_t j = 0; j < n; ++j) dst[j] += src[base + j];
  return out;
}

// Calls fn(i, i mod na, i mod nb) for i < n where na and nb divide n.
template <typename Fn>
void for_each_broadcast(std::size_t n, std::size_t na, std::size_t nb, Fn&& fn) {
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
  } else if (na == n) {
    for (std::size_t base = 0; base < n; base += nb)
      for (std::size_t k = 0; k < nb; ++k) fn(base + k, base + k, k);
  } else {
    for (std::size_t base = 0; base < n; base += na)
      for (std::size_t j = 0; j < na; ++j) fn(base + j, j, base + j);
  }
}

template <typename T>
Graph<T>& graph_of(Var<T> a, Var<T> b) {
  if (a.graph != b.graph || a.graph == nullptr) throw std::invalid_argument("operands from different graphs");
  return *a.graph;
}

// Elementwise binary op with broadcasting. `f` computes the value, `dfa` and
// `dfb` the partials given (a, b, y).
template <typename T, typename F, typename DA, typename DB>
Var<T> binary(const char* name, Var<T> a, Var<T> b, F f, DA dfa, DB dfb) {
  Graph<T>& g = graph_of(a, b);
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Shape out_shape;
  if (av.shape() == bv.shape() || is_suffix(bv.shape(), av.shape())) {
    out_shape = av.shape();
  } else if (is_suffix(av.shape(), bv.shape())) {
    out_shape = bv.shape();
  } else {
    throw ShapeError(name, {av.shape(), bv.shape()});
  }
  Tensor<T> out(out_shape);
  const std::size_t na = av.size(), nb = bv.size();
  {
    auto o = out.data();
    auto ad = av.data();
    auto bd = bv.data();
    for_each_broadcast(o.size(), na, nb,
                       [&](std::size_t i, std::size_t j, std::size_t k) { o[i] = f(ad[j], bd[k]); });
  }
  const std::size_t ia = a.id, ib = b.id;
  return g.record(name, std::move(out), {ia, ib},
                  [ia, ib, dfa, dfb](Graph<T>& gr, std::size_t self, const Tensor<T>& go) {
                    const auto& A = gr.value(ia);
                    const auto& B = gr.value(ib);
                    const auto& Y = gr.value(self);
                    const std::size_t na = A.size(), nb = B.size();
                    auto ad = A.data();
                    auto bd = B.data();
                    auto yd = Y.data();
                    auto gd = go.data();
                    if (gr.requires_grad(ia)) {
                      Tensor<T> ga(Y.shape());
                      auto gad = ga.data();
                      for_each_broadcast(gad.size(), na, nb, [&](std::size_t i, std::size_t j, std::size_t k) {
                        gad[i] = gd[i] * dfa(ad[j], bd[k], yd[i]);
                      });
                      gr.accumulate(ia, reduce_to(ga, A.shape()));
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor<T> gb(Y.shape());
                      auto gbd = gb.data();
                      for_each_broadcast(gbd.size(), na, nb, [&](std::size_t i, std::size_t j, std::size_t k) {
                        gbd[i] = gd[i] * dfb(ad[j], bd[k], yd[i]);
                      });
                      gr.accumulate(ib, reduce_to(gb, B.shape()));
                    }
                  });
}

// Elementwise unary op; `df` gives dy/dx from (x, y).
template <typename T, typename F, typename DF>
Var<T> unary(const char* name, Var<T> x, F f, DF df) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  {
    auto o = out.data();
    auto xd = xv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(xd[i]);
  }
  const std::size_t ix = x.id;
  return g.record(name, std::move(out), {ix},
                  [ix, df](Graph<T>& gr, std::size_t self, const Tensor<T>& go) {
                    const auto& X = gr.value(ix);
                    const auto& Y = gr.value(self);
                    Tensor<T> gx(X.shape());
                    auto gxd = gx.data();
                    auto xd = X.data();
                    auto yd = Y.data();
                    auto gd = go.data();
                    for (std::size_t i = 0; i < gxd.size(); ++i) gxd[i] = gd[i] * df(xd[i], yd[i]);
                    gr.accumulate(ix, std::move(gx));
                  });
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{1}; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T{1}; },
      [](T, T, T) { return T{-1}; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  if (std::ranges::any_of(b.value().data(), [](T v) { return v == T{0}; })) {
    throw ContractError("div: zero divisor");
  }
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T{1} / y; },
      [](T, T y, T q) { return -q / y; });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T c) {
  return unary<T>(
      "add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(Var<T> x) {
  if (std::ranges::any_of(x.value().data(), [](T v) { return !(v > T{0}); })) {
    throw ContractError("log: input must be positive");
  }
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> sqrt(Var<T> x) {
  if (std::ranges::any_of(x.value().data(), [](T v) { return v < T{0}; })) {
    throw ContractError("sqrt: negative input");
  }
  // At 0 the derivative is unbounded; we propagate 0 there.
  return unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return y > T{0} ? T{0.5} / y : T{0}; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> arccos(Var<T> x) {
  for (T v : x.value().data()) {
    if (!(v >= T{-1} && v <= T{1})) {
      throw ContractError("arccos: input outside [-1, 1]; clamp before arccos");
    }
  }
  return unary<T>(
      "arccos", x, [](T v) { return std::acos(v); },
      [](T v, T) {
        const T s = T{1} - v * v;
        if (!(s > T{0})) throw ContractError("arccos: gradient undefined at +-1; clamp before arccos");
        return T{-1} / std::sqrt(s);
      });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T{1} : T{0}; });
}

template <typename T>
Var<T> maximum(Var<T> x, T c) {
  return unary<T>(
      "max", x, [c](T v) { return v > c ? v : c; }, [c](T v, T) { return v > c ? T{1} : T{0}; });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  // 0.5 (1 + tanh(u)) written as the logistic sigmoid of 2u.
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = static_cast<T>(0.044715);
  auto sig = [](T v) { return T{1} / (T{1} + std::exp(T{-2} * k * (v + c * v * v * v))); };
  return unary<T>(
      "gelu", x, [sig](T v) { return v * sig(v); },
      [sig](T v, T) {
        const T s = sig(v);
        return s + T{2} * v * s * (T{1} - s) * k * (T{1} + T{3} * c * v * v);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Graph<T>& g = graph_of(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  if (A.rank() < 2 || B.rank() < 2 || A.dim_back(1) != B.dim_back(2)) {
    throw ShapeError("matmul", {A.shape(), B.shape()});
  }
  const std::size_t n = A.dim_back(2), k = A.dim_back(1), m = B.dim_back(1);
  const bool shared = B.rank() == 2;
  if (!shared && (B.rank() != A.rank() ||
                  !std::equal(A.shape().begin(), A.shape().end() - 2, B.shape().begin()))) {
    throw ShapeError("matmul", {A.shape(), B.shape()});
  }
  const std::size_t batch = A.size() / (n * k);
  Shape out_shape = A.shape();
  out_shape.back() = m;
  Tensor<T> out(out_shape);
  if (shared) {
    MMap<T>(out.data().data(), batch * n, m).noalias() =
        CMap<T>(A.data().data(), batch * n, k) * CMap<T>(B.data().data(), k, m);
  } else {
    for (std::size_t p = 0; p < batch; ++p) {
      MMap<T>(out.data().data() + p * n * m, n, m).noalias() =
          CMap<T>(A.data().data() + p * n * k, n, k) * CMap<T>(B.data().data() + p * k * m, k, m);
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return g.record("matmul", std::move(out), {ia, ib},
                  [ia, ib, n, k, m, batch, shared](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                    const auto& A = gr.value(ia);
                    const auto& B = gr.value(ib);
                    if (gr.requires_grad(ia)) {
                      Tensor<T> ga(A.shape());
                      if (shared) {
                        MMap<T>(ga.data().data(), batch * n, k).noalias() =
                            CMap<T>(go.data().data(), batch * n, m) *
                            CMap<T>(B.data().data(), k, m).transpose();
                      } else {
                        for (std::size_t p = 0; p < batch; ++p) {
                          MMap<T>(ga.data().data() + p * n * k, n, k).noalias() =
                              CMap<T>(go.data().data() + p * n * m, n, m) *
                              CMap<T>(B.data().data() + p * k * m, k, m).transpose();
                        }
                      }
                      gr.accumulate(ia, std::move(ga));
                    }
                    if (gr.requires_grad(ib)) {
                      Tensor<T> gb(B.shape());
                      if (shared) {
                        MMap<T>(gb.data().data(), k, m).noalias() =
                            CMap<T>(A.data().data(), batch * n, k).transpose() *
                            CMap<T>(go.data().data(), batch * n, m);
                      } else {
                        for (std::size_t p = 0; p < batch; ++p) {
                          MMap<T>(gb.data().data() + p * k * m, k, m).noalias() =
                              CMap<T>(A.data().data() + p * n * k, n, k).transpose() *
                              CMap<T>(go.data().data() + p * n * m, n, m);
                        }
                      }
                      gr.accumulate(ib, std::move(gb));
                    }
                  });
}

namespace {
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  const std::size_t r = x.dim_back(2), c = x.dim_back(1);
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor<T> out(s);
  const std::size_t batch = x.size() / (r * c);
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t p = 0; p < batch; ++p) {
    const std::size_t off = p * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[off + j * r + i] = src[off + i * c + j];
  }
  return out;
}
}  // namespace

template <typename T>
Var<T> transpose(Var<T> x) {
  if (x.value().rank() < 2) throw ShapeError("transpose", {x.shape()});
  const std::size_t ix = x.id;
  return x.graph->record("transpose", transpose_last2(x.value()), {ix},
                         [ix](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           gr.accumulate(ix, transpose_last2(go));
                         });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> x, int axis) {
  const Tensor<T>& X = x.value();
  const std::size_t ax = norm_axis(axis, X.rank(), "sum", X.shape());
  const auto sp = split_at(X.shape(), ax);
  if (sp.extent == 0) throw ShapeError("sum (empty axis)", {X.shape()});
  Shape s = X.shape();
  s.erase(s.begin() + static_cast<long>(ax));
  Tensor<T> out(s);
  auto src = X.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t i = 0; i < sp.inner; ++i)
        dst[o * sp.inner + i] += src[(o * sp.extent + e) * sp.inner + i];
  const std::size_t ix = x.id;
  return x.graph->record("sum", std::move(out), {ix},
                         [ix, sp](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           Tensor<T> gx(gr.value(ix).shape());
                           auto d = gx.data();
                           auto s = go.data();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t e = 0; e < sp.extent; ++e)
                               for (std::size_t i = 0; i < sp.inner; ++i)
                                 d[(o * sp.extent + e) * sp.inner + i] = s[o * sp.inner + i];
                           gr.accumulate(ix, std::move(gx));
                         });
}

template <typename T>
Var<T> mean(Var<T> x, int axis) {
  const std::size_t ax = norm_axis(axis, x.value().rank(), "mean", x.shape());
  const std::size_t n = x.shape()[ax];
  return scale(sum(x, axis), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  const Tensor<T>& X = x.value();
  T acc{0};
  for (T v : X.data()) acc += v;
  const std::size_t ix = x.id;
  return x.graph->record("sum_all", Tensor<T>::scalar(acc), {ix},
                         [ix](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           gr.accumulate(ix, Tensor<T>(gr.value(ix).shape(), go.item()));
                         });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  if (x.value().size() == 0) throw ShapeError("mean_all (empty)", {x.shape()});
  return scale(sum_all(x), T{1} / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> logsumexp(Var<T> x, int axis) {
  const Tensor<T>& X = x.value();
  const std::size_t ax = norm_axis(axis, X.rank(), "logsumexp", X.shape());
  const auto sp = split_at(X.shape(), ax);
  if (sp.extent == 0) throw ShapeError("logsumexp (empty axis)", {X.shape()});
  Shape s = X.shape();
  s.erase(s.begin() + static_cast<long>(ax));
  Tensor<T> out(s);
  auto src = X.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      T mx = src[o * sp.extent * sp.inner + i];
      for (std::size_t e = 1; e < sp.extent; ++e)
        mx = std::max(mx, src[(o * sp.extent + e) * sp.inner + i]);
      T acc{0};
      for (std::size_t e = 0; e < sp.extent; ++e)
        acc += std::exp(src[(o * sp.extent + e) * sp.inner + i] - mx);
      dst[o * sp.inner + i] = mx + std::log(acc);
    }
  }
  const std::size_t ix = x.id;
  return x.graph->record("logsumexp", std::move(out), {ix},
                         [ix, sp](Graph<T>& gr, std::size_t self, const Tensor<T>& go) {
                           const auto& X = gr.value(ix);
                           const auto& Y = gr.value(self);
                           Tensor<T> gx(X.shape());
                           auto d = gx.data();
                           auto xs = X.data();
                           auto ys = Y.data();
                           auto gs = go.data();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t e = 0; e < sp.extent; ++e)
                               for (std::size_t i = 0; i < sp.inner; ++i) {
                                 const std::size_t j = (o * sp.extent + e) * sp.inner + i;
                                 d[j] = gs[o * sp.inner + i] * std::exp(xs[j] - ys[o * sp.inner + i]);
                               }
                           gr.accumulate(ix, std::move(gx));
                         });
}

// ---------------------------------------------------------------------------
// Normalizations

template <typename T>
Var<T> softmax(Var<T> x, bool causal) {
  const Tensor<T>& X = x.value();
  if (X.rank() < 1 || (causal && (X.rank() < 2 || X.dim_back(1) != X.dim_back(2)))) {
    throw ShapeError(causal ? "softmax (causal)" : "softmax", {X.shape()});
  }
  const std::size_t n = X.dim_back(1);
  if (n == 0) throw ShapeError("softmax (empty axis)", {X.shape()});
  const std::size_t rows = X.size() / n;
  Tensor<T> out(X.shape());
  auto src = X.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t valid = causal ? (r % n) + 1 : n;
    const T* xr = src.data() + r * n;
    T* yr = dst.data() + r * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, xr[j]);
    T acc{0};
    for (std::size_t j = 0; j < valid; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      acc += yr[j];
    }
    const T inv = T{1} / acc;
    for (std::size_t j = 0; j < valid; ++j) yr[j] *= inv;
  }
  const std::size_t ix = x.id;
  return x.graph->record("softmax", std::move(out), {ix},
                         [ix, n, rows](Graph<T>& gr, std::size_t self, const Tensor<T>& go) {
                           const auto& Y = gr.value(self);
                           Tensor<T> gx(Y.shape());
                           auto d = gx.data();
                           auto ys = Y.data();
                           auto gs = go.data();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* y = ys.data() + r * n;
                             const T* gg = gs.data() + r * n;
                             T dot{0};
                             for (std::size_t j = 0; j < n; ++j) dot += y[j] * gg[j];
                             for (std::size_t j = 0; j < n; ++j) d[r * n + j] = y[j] * (gg[j] - dot);
                           }
                           gr.accumulate(ix, std::move(gx));
                         });
}

template <typename T>
Var<T> layer_norm(Var<T> x, T eps) {
  const Tensor<T>& X = x.value();
  if (X.rank() < 1 || X.dim_back(1) == 0) throw ShapeError("layer_norm", {X.shape()});
  const std::size_t n = X.dim_back(1);
  const std::size_t rows = X.size() / n;
  Tensor<T> out(X.shape());
  std::vector<T> rstd(rows);
  auto src = X.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = src.data() + r * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < n; ++j) dst[r * n + j] = (xr[j] - mu) * rs;
  }
  const std::size_t ix = x.id;
  return x.graph->record(
      "layer_norm", std::move(out), {ix},
      [ix, n, rows, rstd = std::move(rstd)](Graph<T>& gr, std::size_t self, const Tensor<T>& go) {
        const auto& Y = gr.value(self);
        Tensor<T> gx(Y.shape());
        auto d = gx.data();
        auto ys = Y.data();
        auto gs = go.data();
        const T inv_n = T{1} / static_cast<T>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = ys.data() + r * n;
          const T* gg = gs.data() + r * n;
          T mg{0}, mgy{0};
          for (std::size_t j = 0; j < n; ++j) {
            mg += gg[j];
            mgy += gg[j] * y[j];
          }
          mg *= inv_n;
          mgy *= inv_n;
          for (std::size_t j = 0; j < n; ++j) d[r * n + j] = rstd[r] * (gg[j] - mg - y[j] * mgy);
        }
        gr.accumulate(ix, std::move(gx));
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::size_t> ids, const Shape& ids_shape) {
  const Tensor<T>& W = table.value();
  if (W.rank() != 2 || shape_numel(ids_shape) != ids.size()) {
    throw ShapeError("embedding", {W.shape(), ids_shape});
  }
  const std::size_t V = W.dim(0), d = W.dim(1);
  for (auto id : ids) {
    if (id >= V) throw std::out_of_range("embedding: token id " + std::to_string(id) +
                                         " out of range for vocabulary " + std::to_string(V));
  }
  Shape s = ids_shape;
  s.push_back(d);
  Tensor<T> out(s);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::copy_n(W.data().data() + ids[t] * d, d, out.data().data() + t * d);
  }
  const std::size_t iw = table.id;
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.graph->record(
      "embedding", std::move(out), {iw},
      [iw, d, idv = std::move(idv)](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
        Tensor<T> gw(gr.value(iw).shape());
        auto dst = gw.data();
        auto src = go.data();
        for (std::size_t t = 0; t < idv.size(); ++t)
          for (std::size_t j = 0; j < d; ++j) dst[idv[t] * d + j] += src[t * d + j];
        gr.accumulate(iw, std::move(gw));
      });
}

template <typename T>
Var<T> pick(Var<T> x, std::span<const std::size_t> index) {
  const Tensor<T>& X = x.value();
  if (X.rank() < 1) throw ShapeError("pick", {X.shape()});
  const std::size_t V = X.dim_back(1);
  const std::size_t rows = X.size() / V;
  if (index.size() != rows) throw ShapeError("pick", {X.shape(), Shape{index.size()}});
  Shape s(X.shape().begin(), X.shape().end() - 1);
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= V) throw std::out_of_range("pick: index out of range");
    out[r] = X[r * V + index[r]];
  }
  const std::size_t ix = x.id;
  std::vector<std::size_t> idx(index.begin(), index.end());
  return x.graph->record("pick", std::move(out), {ix},
                         [ix, V, idx = std::move(idx)](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           Tensor<T> gx(gr.value(ix).shape());
                           for (std::size_t r = 0; r < idx.size(); ++r) gx[r * V + idx[r]] = go[r];
                           gr.accumulate(ix, std::move(gx));
                         });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Graph<T>& g = *parts[0].graph;
  const Shape& s0 = parts[0].shape();
  if (s0.empty()) throw ShapeError("concat", {s0});
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  std::vector<Shape> all;
  std::size_t total = 0;
  for (const auto& p : parts) {
    all.push_back(p.shape());
    const Shape& s = p.shape();
    if (p.graph != &g || s.size() != s0.size() ||
        !std::equal(s.begin(), s.end() - 1, s0.begin())) {
      throw ShapeError("concat", all);
    }
    widths.push_back(s.back());
    ids.push_back(p.id);
    total += s.back();
  }
  Shape s = s0;
  s.back() = total;
  Tensor<T> out(s);
  const std::size_t rows = out.size() / std::max<std::size_t>(total, 1);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src.data() + r * widths[k], widths[k], out.data().data() + r * total + off);
    off += widths[k];
  }
  return g.record("concat", std::move(out), ids,
                  [ids, widths, total, rows](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (gr.requires_grad(ids[k])) {
                        Tensor<T> gp(gr.value(ids[k]).shape());
                        for (std::size_t r = 0; r < rows; ++r)
                          std::copy_n(go.data().data() + r * total + off, widths[k],
                                      gp.data().data() + r * widths[k]);
                        gr.accumulate(ids[k], std::move(gp));
                      }
                      off += widths[k];
                    }
                  });
}

template <typename T>
Var<T> slice_last(Var<T> x, std::size_t start, std::size_t length) {
  const Tensor<T>& X = x.value();
  if (X.rank() < 1 || start + length > X.dim_back(1)) throw ShapeError("slice_last", {X.shape()});
  const std::size_t n = X.dim_back(1);
  const std::size_t rows = X.size() / n;
  Shape s = X.shape();
  s.back() = length;
  Tensor<T> out(s);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(X.data().data() + r * n + start, length, out.data().data() + r * length);
  const std::size_t ix = x.id;
  return x.graph->record("slice_last", std::move(out), {ix},
                         [ix, n, rows, start, length](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           Tensor<T> gx(gr.value(ix).shape());
                           for (std::size_t r = 0; r < rows; ++r)
                             std::copy_n(go.data().data() + r * length, length,
                                         gx.data().data() + r * n + start);
                           gr.accumulate(ix, std::move(gx));
                         });
}

template <typename T>
Var<T> repeat_last(Var<T> x, std::size_t k) {
  const Tensor<T>& X = x.value();
  Shape s = X.shape();
  s.push_back(k);
  Tensor<T> out(s);
  for (std::size_t i = 0; i < X.size(); ++i) std::fill_n(out.data().data() + i * k, k, X[i]);
  const std::size_t ix = x.id;
  return x.graph->record("repeat_last", std::move(out), {ix},
                         [ix, k](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           Tensor<T> gx(gr.value(ix).shape());
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             T acc{0};
                             for (std::size_t j = 0; j < k; ++j) acc += go[i * k + j];
                             gx[i] = acc;
                           }
                           gr.accumulate(ix, std::move(gx));
                         });
}

template <typename T>
Var<T> offdiag(Var<T> x) {
  const Tensor<T>& X = x.value();
  if (X.rank() < 2 || X.dim_back(1) != X.dim_back(2)) throw ShapeError("offdiag", {X.shape()});
  const std::size_t n = X.dim_back(1);
  const std::size_t batch = X.size() / (n * n);
  Shape s(X.shape().begin(), X.shape().end() - 2);
  s.push_back(n * (n - 1));
  Tensor<T> out(s);
  auto dst = out.data();
  auto src = X.data();
  std::size_t w = 0;
  for (std::size_t p = 0; p < batch; ++p)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) dst[w++] = src[(p * n + i) * n + j];
  const std::size_t ix = x.id;
  return x.graph->record("offdiag", std::move(out), {ix},
                         [ix, n, batch](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           Tensor<T> gx(gr.value(ix).shape());
                           auto d = gx.data();
                           std::size_t r = 0;
                           for (std::size_t p = 0; p < batch; ++p)
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < n; ++j)
                                 if (i != j) d[(p * n + i) * n + j] = go[r++];
                           gr.accumulate(ix, std::move(gx));
                         });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.graph->record("reshape", std::move(out), {ix},
                         [ix](Graph<T>& gr, std::size_t, const Tensor<T>& go) {
                           gr.accumulate(ix, go.reshaped(gr.value(ix).shape()));
                         });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> evaluate_primitive(std::string_view name, std::span<const Tensor<T>> inputs,
                             const PrimitiveArgs& args) {
  Graph<T> g;
  std::vector<Var<T>> in;
  for (const auto& t : inputs) in.push_back(g.constant(t));
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(n) + " inputs");
    }
  };
  const T lo = static_cast<T>(args.lo), hi = static_cast<T>(args.hi);
  Var<T> r;
  if (name == "add") { need(2); r = add(in[0], in[1]); }
  else if (name == "sub") { need(2); r = sub(in[0], in[1]); }
  else if (name == "mul") { need(2); r = mul(in[0], in[1]); }
  else if (name == "div") { need(2); r = div(in[0], in[1]); }
  else if (name == "matmul") { need(2); r = matmul(in[0], in[1]); }
  else if (name == "transpose") { need(1); r = transpose(in[0]); }
  else if (name == "exp") { need(1); r = exp(in[0]); }
  else if (name == "log") { need(1); r = log(in[0]); }
  else if (name == "sqrt") { need(1); r = sqrt(in[0]); }
  else if (name == "square") { need(1); r = square(in[0]); }
  else if (name == "arccos") { need(1); r = arccos(in[0]); }
  else if (name == "clamp") { need(1); r = clamp(in[0], lo, hi); }
  else if (name == "sum") { need(1); r = sum(in[0], args.axis); }
  else if (name == "mean") { need(1); r = mean(in[0], args.axis); }
  else if (name == "max") { need(1); r = maximum(in[0], static_cast<T>(args.constant)); }
  else if (name == "softmax") { need(1); r = softmax(in[0], args.causal); }
  else if (name == "layer_norm") { need(1); r = layer_norm(in[0], static_cast<T>(args.eps)); }
  else if (name == "gelu") { need(1); r = gelu(in[0]); }
  else if (name == "logsumexp") { need(1); r = logsumexp(in[0], args.axis); }
  else if (name == "offdiag") { need(1); r = offdiag(in[0]); }
  else if (name == "concat") { r = concat(std::span<const Var<T>>(in)); }
  else throw std::invalid_argument("unknown primitive: " + std::string(name));
  return r.value();
}

#define CONDENSE_INSTANTIATE(T)                                                              \
  template class Graph<T>;                                                                   \
  template Var<T> add(Var<T>, Var<T>);                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                       \
  template Var<T> div(Var<T>, Var<T>);                                                       \
  template Var<T> scale(Var<T>, T);                                                          \
  template Var<T> add_scalar(Var<T>, T);                                                     \
  template Var<T> matmul(Var<T>, Var<T>);                                                    \
  template Var<T> transpose(Var<T>);                                                         \
  template Var<T> exp(Var<T>);                                                               \
  template Var<T> log(Var<T>);                                                               \
  template Var<T> sqrt(Var<T>);                                                              \
  template Var<T> square(Var<T>);                                                            \
  template Var<T> arccos(Var<T>);                                                            \
  template Var<T> clamp(Var<T>, T, T);                                                       \
  template Var<T> maximum(Var<T>, T);                                                        \
  template Var<T> sum(Var<T>, int);                                                          \
  template Var<T> mean(Var<T>, int);                                                         \
  template Var<T> sum_all(Var<T>);                                                           \
  template Var<T> mean_all(Var<T>);                                                          \
  template Var<T> logsumexp(Var<T>, int);                                                    \
  template Var<T> softmax(Var<T>, bool);                                                     \
  template Var<T> layer_norm(Var<T>, T);                                                     \
  template Var<T> gelu(Var<T>);                                                              \
  template Var<T> embedding(Var<T>, std::span<const std::size_t>, const Shape&);             \
  template Var<T> pick(Var<T>, std::span<const std::size_t>);                                \
  template Var<T> concat(std::span<const Var<T>>);                                           \
  template Var<T> slice_last(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> repeat_last(Var<T>, std::size_t);                                          \
  template Var<T> offdiag(Var<T>);                                                           \
  template Var<T> reshape(Var<T>, Shape);                                                    \
  template Tensor<T> evaluate_primitive(std::string_view, std::span<const Tensor<T>>,        \
                                        const PrimitiveArgs&);

CONDENSE_INSTANTIATE(float)
CONDENSE_INSTANTIATE(double)

#undef CONDENSE_INSTANTIATE

}  // namespace condense
