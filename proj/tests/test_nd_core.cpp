#include <doctest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace condense;
using namespace condense::testing;

TEST_CASE("matmul by identity returns the operand") {
  Rng rng(1);
  const TensorD a = normal({2, 5}, rng);
  const TensorD id = TensorD::matrix(2, 2, {1, 0, 0, 1});
  const TensorD in[] = {id, a};
  CHECK(evaluate_primitive<double>("matmul", in) == a);
}

TEST_CASE("gelu fixes zero and layer_norm zeroes a constant row") {
  const TensorD zero[] = {TensorD::vector({0.0})};
  CHECK(evaluate_primitive<double>("gelu", zero)[0] == 0.0);
  const TensorD c[] = {TensorD::vector({3.0, 3.0, 3.0, 3.0})};
  const TensorD y = evaluate_primitive<double>("layer_norm", c);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("backward of simple roots") {
  SUBCASE("x^2 at 3") {
    Graph<double> g;
    const auto x = g.param(TensorD::scalar(3.0));
    g.backward(square(x));
    CHECK(g.grad(x).item() == doctest::Approx(6.0).epsilon(1e-15));
  }
  SUBCASE("logsumexp gradient is softmax") {
    Graph<double> g;
    const auto v = g.param(TensorD::vector({0.3, -1.2, 2.0, 0.0}));
    g.backward(logsumexp(v, -1));
    const TensorD sm = softmax(g.constant(v.value())).value();
    const TensorD gr = g.grad(v);
    for (std::size_t i = 0; i < 4; ++i) CHECK(gr[i] == doctest::Approx(sm[i]).epsilon(1e-14));
  }
  SUBCASE("fan-out accumulates") {
    Graph<double> g;
    const auto x = g.param(TensorD::scalar(2.0));
    g.backward(add(mul(x, x), x));
    CHECK(g.grad(x).item() == doctest::Approx(5.0));
  }
  SUBCASE("non-scalar root is rejected") {
    Graph<double> g;
    const auto x = g.param(TensorD::vector({1.0, 2.0}));
    CHECK_THROWS_AS(g.backward(square(x)), ShapeError);
  }
  SUBCASE("detached leaf gets a zero gradient") {
    Graph<double> g;
    const auto x = g.param(TensorD::scalar(1.5));
    const auto unused = g.param(TensorD::vector({1.0, 2.0, 3.0}));
    g.backward(square(x));
    const TensorD gu = g.grad(unused);
    CHECK(gu.shape() == Shape{3});
    for (double v : gu.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("logsumexp values") {
  auto lse = [](TensorD v) {
    const TensorD in[] = {std::move(v)};
    return evaluate_primitive<double>("logsumexp", in).item();
  };
  CHECK(lse(TensorD::vector({0.0, 0.0})) == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(lse(TensorD::vector({1000.0, 1000.0})) == doctest::Approx(1000.0 + std::numbers::ln2).epsilon(1e-15));
  CHECK(lse(TensorD::vector({0.0})) == 0.0);
  CHECK_THROWS_AS(lse(TensorD(Shape{0})), ShapeError);

  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    TensorD v = uniform({7}, rng, -30, 30);
    const double c = 100.0 * (rng.uniform() - 0.5);
    TensorD shifted = v;
    for (double& x : shifted.data()) x += c;
    CHECK(std::abs(lse(shifted) - (lse(v) + c)) < 1e-12);
  }
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
  Rng rng(3);
  const TensorD x = uniform({5, 9}, rng, -10, 10);
  TensorD shifted = x;
  for (std::size_t r = 0; r < 5; ++r) {
    const double c = 20.0 * rng.uniform();
    for (std::size_t j = 0; j < 9; ++j) shifted.at(r, j) += c;
  }
  const TensorD in[] = {x};
  const TensorD in2[] = {shifted};
  const TensorD y = evaluate_primitive<double>("softmax", in);
  const TensorD y2 = evaluate_primitive<double>("softmax", in2);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      s += y.at(r, j);
      CHECK(std::abs(y.at(r, j) - y2.at(r, j)) < 1e-12);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("finite differences") {
  SUBCASE("sum has an all-ones gradient") {
    Rng rng(4);
    const TensorD x = normal({3, 4}, rng);
    const TensorD g = finite_difference_gradient(
        [](const TensorD& p) {
          double s = 0.0;
          for (double v : p.data()) s += v;
          return s;
        },
        x);
    for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-8));
  }
  SUBCASE("x^2 at 3") {
    const TensorD g =
        finite_difference_gradient([](const TensorD& p) { return p[0] * p[0]; }, TensorD::vector({3.0}), 1e-6);
    CHECK(std::abs(g[0] - 6.0) < 1e-7);
  }
  SUBCASE("non-finite probe names the coordinate") {
    const TensorD x = TensorD::vector({1.0, 1e-7, 2.0});
    try {
      finite_difference_gradient(
          [](const TensorD& p) {
            double s = 0.0;
            for (double v : p.data()) s += std::log(v);
            return s;
          },
          x);
      FAIL("expected NonFiniteProbe");
    } catch (const NonFiniteProbe& e) {
      CHECK(e.coordinate() == 1);
    }
  }
}

TEST_CASE("every differentiable primitive matches finite differences") {
  Rng rng(5);
  const double tol = 1e-5;
  auto check_unary = [&](const char* name, const TensorD& x, const UnaryGraphFn& f) {
    INFO(name);
    CHECK(grad_error(x, [&](Graph<double>& g, Var<double> v) { return weighted_sum(g, f(g, v)); }) < tol);
  };
  const TensorD x = uniform({3, 4}, rng);
  const TensorD other = uniform({3, 4}, rng);
  const TensorD row = uniform({4}, rng);
  const TensorD positive = uniform({3, 4}, rng, 0.5, 2.0);

  check_unary("add", x, [&](auto& g, auto v) { return add(v, g.constant(other)); });
  check_unary("add broadcast", x, [&](auto& g, auto v) { return add(v, g.constant(row)); });
  check_unary("add broadcast rhs", row, [&](auto& g, auto v) { return add(g.constant(x), v); });
  check_unary("sub", x, [&](auto& g, auto v) { return sub(g.constant(other), v); });
  check_unary("mul", x, [&](auto& g, auto v) { return mul(v, g.constant(other)); });
  check_unary("mul self", x, [&](auto&, auto v) { return mul(v, v); });
  check_unary("div numerator", x, [&](auto& g, auto v) { return div(v, g.constant(positive)); });
  check_unary("div denominator", positive, [&](auto& g, auto v) { return div(g.constant(x), v); });
  check_unary("scale", x, [](auto&, auto v) { return scale(v, 2.5); });
  check_unary("add_scalar", x, [](auto&, auto v) { return add_scalar(v, -0.7); });
  const TensorD rhs = uniform({4, 2}, rng);
  check_unary("matmul lhs", x, [&](auto& g, auto v) { return matmul(v, g.constant(rhs)); });
  check_unary("matmul rhs", rhs, [&](auto& g, auto v) { return matmul(g.constant(x), v); });
  const TensorD batched = uniform({2, 3, 4}, rng);
  const TensorD batched_rhs = uniform({2, 4, 3}, rng);
  check_unary("matmul batched", batched, [&](auto& g, auto v) { return matmul(v, g.constant(batched_rhs)); });
  check_unary("matmul batched rhs", batched_rhs, [&](auto& g, auto v) { return matmul(g.constant(batched), v); });
  check_unary("matmul shared rhs", rhs, [&](auto& g, auto v) { return matmul(g.constant(batched), v); });
  check_unary("transpose", batched, [](auto&, auto v) { return transpose(v); });
  check_unary("exp", x, [](auto&, auto v) { return exp(v); });
  check_unary("log", positive, [](auto&, auto v) { return log(v); });
  check_unary("sqrt", positive, [](auto&, auto v) { return sqrt(v); });
  check_unary("square", x, [](auto&, auto v) { return square(v); });
  check_unary("arccos", uniform({3, 4}, rng, -0.99, 0.99), [](auto&, auto v) { return arccos(v); });
  check_unary("clamp", x, [](auto&, auto v) { return clamp(v, -1.0, 1.0); });
  check_unary("maximum", x, [](auto&, auto v) { return maximum(v, 0.1); });
  check_unary("sum axis 0", x, [](auto&, auto v) { return sum(v, 0); });
  check_unary("sum axis -1", batched, [](auto&, auto v) { return sum(v, -1); });
  check_unary("mean axis 1", batched, [](auto&, auto v) { return mean(v, 1); });
  check_unary("sum_all", x, [](auto&, auto v) { return sum_all(v); });
  check_unary("mean_all", x, [](auto&, auto v) { return mean_all(v); });
  check_unary("logsumexp", x, [](auto&, auto v) { return logsumexp(v, -1); });
  check_unary("logsumexp axis 0", x, [](auto&, auto v) { return logsumexp(v, 0); });
  check_unary("softmax", x, [](auto&, auto v) { return softmax(v); });
  check_unary("softmax causal", uniform({2, 4, 4}, rng), [](auto&, auto v) { return softmax(v, true); });
  check_unary("layer_norm", x, [](auto&, auto v) { return layer_norm(v, 1e-5); });
  check_unary("gelu", x, [](auto&, auto v) { return gelu(v); });
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  check_unary("embedding", x, [&](auto&, auto v) { return embedding(v, ids, Shape{2, 2}); });
  const std::vector<std::size_t> picks{3, 0, 1};
  check_unary("pick", x, [&](auto&, auto v) { return pick(v, picks); });
  const TensorD middle = uniform({3, 2}, rng);
  check_unary("concat", x, [&](auto& g, auto v) {
    const Var<double> parts[] = {v, g.constant(middle), v};
    return concat<double>(parts);
  });
  check_unary("slice_last", x, [](auto&, auto v) { return slice_last(v, 1, 2); });
  check_unary("repeat_last", x, [](auto&, auto v) { return repeat_last(v, 3); });
  check_unary("offdiag", uniform({2, 3, 3}, rng), [](auto&, auto v) { return offdiag(v); });
  check_unary("reshape", x, [](auto&, auto v) { return reshape(v, Shape{2, 6}); });
}

TEST_CASE("shape errors name the primitive and the shapes") {
  Graph<double> g;
  const auto a = g.constant(TensorD(Shape{2, 3}));
  const auto b = g.constant(TensorD(Shape{3, 2}));
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.primitive() == "add");
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
    CHECK(std::string(e.what()).find("[3,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("arccos rejects unclamped input") {
  const TensorD in[] = {TensorD::vector({0.5, 1.0000001})};
  CHECK_THROWS_AS(evaluate_primitive<double>("arccos", in), ContractError);
  const TensorD ok[] = {TensorD::vector({-1.0, 1.0})};
  const TensorD y = evaluate_primitive<double>("arccos", ok);
  CHECK(y[0] == doctest::Approx(std::numbers::pi));
  CHECK(y[1] == 0.0);
}

TEST_CASE("maximum has zero subgradient at the constant") {
  Graph<double> g;
  const auto x = g.param(TensorD::vector({0.0, 1.0, -1.0}));
  g.backward(sum_all(maximum(x, 0.0)));
  const TensorD gr = g.grad(x);
  CHECK(gr[0] == 0.0);
  CHECK(gr[1] == 1.0);
  CHECK(gr[2] == 0.0);
}

TEST_CASE("evaluation is bit-deterministic") {
  Rng rng(6);
  const TensorD x = normal({4, 8}, rng);
  auto run = [&] {
    Graph<double> g;
    const auto v = g.param(x);
    const auto y = sum_all(gelu(layer_norm(matmul(v, transpose(v)), 1e-5)));
    g.backward(y);
    return std::pair{y.value(), g.grad(v)};
  };
  CHECK(run() == run());
}
