#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "condense/geometry.hpp"
#include "condense/losses.hpp"
#include "support.hpp"

using namespace condense;
using namespace condense::testing;

namespace {

// Rows rotated by a random orthogonal matrix (Gram-Schmidt of a Gaussian).
TensorD rotate(const TensorD& z, Rng& rng) {
  const std::size_t d = z.dim(1);
  TensorD q = normal({d, d}, rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += q.at(i, k) * q.at(j, k);
      for (std::size_t k = 0; k < d; ++k) q.at(i, k) -= dot * q.at(j, k);
    }
    double n = 0.0;
    for (std::size_t k = 0; k < d; ++k) n += q.at(i, k) * q.at(i, k);
    for (std::size_t k = 0; k < d; ++k) q.at(i, k) /= std::sqrt(n);
  }
  TensorD out(z.shape());
  for (std::size_t r = 0; r < z.dim(0); ++r)
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t k = 0; k < d; ++k) out.at(r, c) += z.at(r, k) * q.at(k, c);
  return out;
}

TensorD permute_rows(const TensorD& z) {
  TensorD out(z.shape());
  const std::size_t n = z.dim(0), d = z.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) out.at(i, k) = z.at((i * 3 + 1) % n, k);
  return out;
}

TensorD rescale_rows(const TensorD& z, Rng& rng) {
  TensorD out = z;
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    const double s = 0.2 + 5.0 * rng.uniform();
    for (std::size_t k = 0; k < z.dim(1); ++k) out.at(i, k) *= s;
  }
  return out;
}

// Direct transcription of the decorrelation formula.
double decorrelation_oracle(const TensorD& z, double divisor) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t i = 0; i < n; ++i) mean[k] += z.at(i, k);
    mean[k] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sd[k] += (z.at(i, k) - mean[k]) * (z.at(i, k) - mean[k]);
    sd[k] = std::max(std::sqrt(sd[k] / static_cast<double>(n)), 1e-8);
  }
  double loss = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) {
      if (a == b) continue;
      double c = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        c += (z.at(i, a) - mean[a]) / sd[a] * (z.at(i, b) - mean[b]) / sd[b];
      c /= divisor;
      loss += c * c;
    }
  }
  return loss;
}

double naive_kd(const std::vector<double>& t, const std::vector<double>& s, double tau) {
  double zt = 0.0, zs = 0.0;
  for (double v : t) zt += std::exp(v / tau);
  for (double v : s) zs += std::exp(v / tau);
  double acc = 0.0;
  for (std::size_t a = 0; a < t.size(); ++a) acc += std::exp(t[a] / tau) / zt * std::log(std::exp(s[a] / tau) / zs);
  return -tau * tau * acc;
}

TensorD unit_angle_pair(double angle) {
  return TensorD::matrix(2, 2, {1.0, 0.0, std::cos(angle), std::sin(angle)});
}

}  // namespace

TEST_CASE("angular distance") {
  CHECK(angular_distance(1.0, 1e-6) == std::acos(1.0 - 1e-6) / std::numbers::pi);
  CHECK(angular_distance(0.0, 1e-6) == 0.5);
  CHECK(angular_distance(-1.0, 1e-6) == doctest::Approx(1.0).epsilon(1e-3));
  double prev = 2.0;
  for (int i = 0; i <= 20; ++i) {
    const double d = angular_distance(-1.0 + 0.1 * i, 1e-6);
    CHECK(d < prev);
    prev = d;
  }
}

TEST_CASE("dispersion loss closed forms") {
  const double eps = 1e-6;
  CHECK(std::abs(dispersion_loss(TensorD::matrix(2, 2, {1, 0, 0, 1})) + 0.5) < 1e-12);
  CHECK(std::abs(dispersion_loss(TensorD::matrix(2, 3, {2, 1, 0, 2, 1, 0})) +
                 std::acos(1.0 - eps) / std::numbers::pi) < 1e-12);
  CHECK(std::abs(dispersion_loss(TensorD::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1})) + 0.5) < 1e-12);
  const double s3 = std::sqrt(3.0) / 2.0;
  // Pairwise 60 degrees: unit vectors from a regular tetrahedron-like cone.
  const TensorD sixty = TensorD::matrix(3, 3, {1, 0, 0, 0.5, s3, 0, 0.5, 0.5 / std::sqrt(3.0), std::sqrt(2.0 / 3.0)});
  CHECK(std::abs(dispersion_loss(sixty) + 1.0 / 3.0) < 1e-12);
  CHECK_THROWS(dispersion_loss(TensorD::matrix(1, 2, {1, 0})));
}

TEST_CASE("dispersion loss falls as two unit vectors open up") {
  double prev = 1.0;
  for (int i = 0; i < 50; ++i) {
    const double angle = std::numbers::pi * (i + 0.5) / 50.0;
    const double v = dispersion_loss(unit_angle_pair(angle));
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("stable log-mean-exp matches the naive form and survives large logits") {
  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(12);
    double naive = 0.0;
    for (double& x : v) {
      x = 100.0 * (rng.uniform() - 0.5);
      naive += std::exp(x);
    }
    naive = std::log(naive / 12.0);
    CHECK(std::abs(log_mean_exp(v) - naive) < 1e-9);
  }
  const std::vector<double> big{1e4, 1e4 - 1.0, 1e4 - 2.0};
  CHECK(std::isinf(std::log((std::exp(big[0]) + std::exp(big[1]) + std::exp(big[2])) / 3.0)));
  const double stable = log_mean_exp(big);
  CHECK(std::isfinite(stable));
  CHECK(stable == doctest::Approx(1e4 + std::log((1.0 + std::exp(-1.0) + std::exp(-2.0)) / 3.0)));
}

TEST_CASE("log-sum form exceeds the log-mean form by log(N(N-1))") {
  Rng rng(32);
  for (std::size_t n : {2u, 3u, 5u, 8u}) {
    const TensorD z = normal({n, 6}, rng);
    const double gap = dispersion_loss_logsum(z, 0.7) - dispersion_loss(z, 0.7);
    CHECK(std::abs(gap - std::log(static_cast<double>(n * (n - 1)))) < 1e-12);
  }
}

TEST_CASE("decorrelation loss") {
  CHECK(decorrelation_loss(TensorD::matrix(4, 2, {1, 1, 2, 2, 3, 3, 4, 4})) == doctest::Approx(32.0).epsilon(1e-12));
  // Centered orthogonal columns.
  CHECK(std::abs(decorrelation_loss(TensorD::matrix(4, 2, {1, 1, -1, 1, 1, -1, -1, -1}))) < 1e-12);
  Rng rng(33);
  const TensorD z = normal({5, 4}, rng);
  CHECK(std::abs(decorrelation_loss(z) - decorrelation_oracle(z, 3.0)) < 1e-10);
  CHECK(std::abs(decorrelation_loss(z, CovarianceDivisor::tokens_minus_one) - decorrelation_oracle(z, 4.0)) < 1e-10);
  TensorD doubled(Shape{10, 4});
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t k = 0; k < 4; ++k) doubled.at(i, k) = z.at(i % 5, k);
  CHECK(std::abs(decorrelation_loss(doubled) - decorrelation_oracle(doubled, 3.0)) < 1e-10);
  CHECK(std::abs(decorrelation_loss(doubled) - 4.0 * decorrelation_loss(z)) < 1e-9);
  CHECK_THROWS(decorrelation_loss(TensorD::matrix(3, 1, {1, 2, 3})));
}

TEST_CASE("l2 repel loss") {
  CHECK(std::abs(l2_repel_loss(TensorD::matrix(2, 2, {1, 0, 1, 0}))) < 1e-12);
  CHECK(std::abs(l2_repel_loss(TensorD::matrix(2, 2, {1, 0, 0, 1})) + 2.0) < 1e-12);
  CHECK(std::abs(l2_repel_loss(TensorD::matrix(2, 2, {1, 0, 0, 1}), 1.0, 0.1) + 1.8) < 1e-12);
}

TEST_CASE("orthogonalization loss") {
  CHECK(std::abs(orthogonalization_loss(TensorD::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 2}))) < 1e-12);
  const double near = 0.5 - std::acos(1.0 - 1e-6) / std::numbers::pi;
  CHECK(std::abs(orthogonalization_loss(TensorD::matrix(2, 2, {1, 1, 1, 1})) - near * near) < 1e-12);
  CHECK(orthogonalization_loss(TensorD::matrix(2, 2, {1, 0, -1, 0})) == 0.0);
}

TEST_CASE("kd loss") {
  const TensorD zero = TensorD::vector({0.0, 0.0});
  CHECK(kd_loss(zero, zero, 1.0) == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  CHECK(kd_loss(zero, zero, 2.0) == doctest::Approx(4.0 * std::numbers::ln2).epsilon(1e-14));
  Rng rng(34);
  for (int t = 0; t < 20; ++t) {
    const double tau = 0.5 + 2.0 * rng.uniform();
    std::vector<double> tv(5), sv(5);
    for (auto& v : tv) v = 3.0 * rng.normal();
    for (auto& v : sv) v = 3.0 * rng.normal();
    const TensorD T(Shape{5}, tv), S(Shape{5}, sv);
    CHECK(std::abs(kd_loss(T, S, tau) - naive_kd(tv, sv, tau)) < 1e-10);
    // Self loss is tau^2 times the teacher entropy, and the minimum over students.
    double z = 0.0, h = 0.0;
    for (double v : tv) z += std::exp(v / tau);
    for (double v : tv) {
      const double p = std::exp(v / tau) / z;
      h -= p * std::log(p);
    }
    CHECK(std::abs(kd_loss(T, T, tau) - tau * tau * h) < 1e-10);
    CHECK(kd_loss(T, S, tau) >= kd_loss(T, T, tau));
  }
  const TensorD V = TensorD::vector({0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(std::abs(kd_loss(V, V, 1.5) - 2.25 * std::log(8.0)) < 1e-12);
}

TEST_CASE("kd gradient against finite differences for random V=5 logits") {
  Rng rng(35);
  const TensorD teacher = normal({5}, rng, 2.0);
  const TensorD student = normal({5}, rng, 2.0);
  CHECK(grad_error(student, [&](Graph<double>& g, Var<double> v) { return kd_loss(g.constant(teacher), v, 1.3); }) < 1e-5);
  CHECK(grad_error(teacher, [&](Graph<double>& g, Var<double> v) { return kd_loss(v, g.constant(student), 1.3); }) < 1e-5);
}

TEST_CASE("loss gradients at 64-bit") {
  Rng rng(36);
  for (std::size_t n : {2u, 5u, 8u}) {
    const TensorD z = normal({n, 16}, rng);
    CHECK(grad_error(z, [](auto&, auto v) { return dispersion_loss(v, 1.0, 1e-6); }) < 1e-4);
    // Two tokens standardize to +-1 exactly, so the decorrelation gradient vanishes there.
    if (n > 2) {
      CHECK(grad_error(z, [](auto&, auto v) { return decorrelation_loss(v, CovarianceDivisor::dim_minus_one); }) < 1e-4);
    }
    CHECK(grad_error(z, [](auto&, auto v) { return l2_repel_loss(v, 16.0, 1e-2); }) < 1e-4);
    CHECK(grad_error(z, [](auto&, auto v) { return orthogonalization_loss(v, 1e-6); }) < 1e-4);
  }
  const TensorD batched = normal({3, 4, 6}, rng);
  CHECK(grad_error(batched, [](auto&, auto v) { return dispersion_loss(v, 1.0, 1e-6); }) < 1e-4);
}

TEST_CASE("token permutation invariance of every family loss") {
  Rng rng(37);
  const TensorD z = normal({7, 5}, rng);
  const TensorD p = permute_rows(z);
  CHECK(std::abs(dispersion_loss(z) - dispersion_loss(p)) < 1e-12);
  CHECK(std::abs(decorrelation_loss(z) - decorrelation_loss(p)) < 1e-12);
  CHECK(std::abs(l2_repel_loss(z, 1.0, 0.1) - l2_repel_loss(p, 1.0, 0.1)) < 1e-12);
  CHECK(std::abs(orthogonalization_loss(z) - orthogonalization_loss(p)) < 1e-12);
}

TEST_CASE("row rescaling: angular losses invariant, l2 repel and decorrelation not") {
  Rng rng(38);
  const TensorD z = normal({6, 4}, rng);
  const TensorD s = rescale_rows(z, rng);
  CHECK(std::abs(dispersion_loss(z) - dispersion_loss(s)) < 1e-9);
  CHECK(std::abs(orthogonalization_loss(z) - orthogonalization_loss(s)) < 1e-9);
  CHECK(std::abs(l2_repel_loss(z) - l2_repel_loss(s)) > 1e-3);
  CHECK(std::abs(decorrelation_loss(z) - decorrelation_loss(s)) > 1e-3);
}

TEST_CASE("rotation: decorrelation is axis dependent, the others are invariant") {
  Rng rng(39);
  const TensorD z = normal({6, 4}, rng);
  const TensorD r = rotate(z, rng);
  CHECK(std::abs(dispersion_loss(z) - dispersion_loss(r)) < 1e-9);
  CHECK(std::abs(orthogonalization_loss(z) - orthogonalization_loss(r)) < 1e-9);
  CHECK(std::abs(l2_repel_loss(z, 1.0, 0.1) - l2_repel_loss(r, 1.0, 0.1)) < 1e-9);
  CHECK(std::abs(decorrelation_loss(z) - decorrelation_loss(r)) > 1e-3);
}

TEST_CASE("combined objective") {
  Rng rng(40);
  const TensorD z1 = normal({4, 3}, rng), z2 = normal({4, 3}, rng);
  LossConfig cfg;
  SUBCASE("lambda 0 returns the training loss node") {
    Graph<double> g;
    const auto ce = g.param(TensorD::scalar(2.5));
    const Var<double> layers[] = {g.constant(z1)};
    cfg.lambda_disp = 0.0;
    const auto total = combined_objective(ce, std::span<const Var<double>>(layers), cfg);
    CHECK(total.id == ce.id);
  }
  SUBCASE("single layer") {
    Graph<double> g;
    const auto ce = g.constant(TensorD::scalar(2.5));
    const Var<double> layers[] = {g.constant(z1)};
    const double v = combined_objective(ce, std::span<const Var<double>>(layers), cfg).value().item();
    CHECK(std::abs(v - (2.5 + 0.1 * dispersion_loss(z1))) < 1e-12);
  }
  SUBCASE("two layers, mean and sum aggregation") {
    Graph<double> g;
    const auto ce = g.constant(TensorD::scalar(1.0));
    const Var<double> layers[] = {g.constant(z1), g.constant(z2)};
    const double hand = dispersion_loss(z1) + dispersion_loss(z2);
    CHECK(std::abs(combined_objective(ce, std::span<const Var<double>>(layers), cfg).value().item() -
                   (1.0 + 0.1 * hand / 2.0)) < 1e-12);
    cfg.layer_aggregation = LayerAggregation::sum;
    CHECK(std::abs(combined_objective(ce, std::span<const Var<double>>(layers), cfg).value().item() -
                   (1.0 + 0.1 * hand)) < 1e-12);
    const TensorD ls[] = {z1, z2};
    const auto r = evaluate_family_loss(ls, cfg);
    CHECK(r.per_layer.size() == 2);
    CHECK(std::abs(r.value - (r.per_layer[0] + r.per_layer[1])) < 1e-12);
  }
  SUBCASE("empty layer list with lambda > 0") {
    Graph<double> g;
    const auto ce = g.constant(TensorD::scalar(1.0));
    CHECK_THROWS(combined_objective(ce, std::span<const Var<double>>(), cfg));
  }
}

TEST_CASE("loss config validation and names") {
  LossConfig c;
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0;
  CHECK_THROWS(c.validate());
  c = LossConfig{};
  c.clamp_eps = 1e-2;
  CHECK_THROWS(c.validate());
  for (auto k : {LossKind::dispersion, LossKind::decorrelation, LossKind::l2_repel, LossKind::orthogonalization})
    CHECK(parse_loss_kind(to_string(k)) == k);
  CHECK_THROWS(parse_loss_kind("hinge"));
}
