#include "condense/losses.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace condense {

std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::dispersion: return "dispersion";
    case LossKind::decorrelation: return "decorrelation";
    case LossKind::l2_repel: return "l2_repel";
    case LossKind::orthogonalization: return "orthogonalization";
  }
  return "?";
}

std::string_view to_string(LayerAggregation a) {
  return a == LayerAggregation::mean ? "mean" : "sum";
}

std::string_view to_string(CovarianceDivisor d) {
  return d == CovarianceDivisor::dim_minus_one ? "dim_minus_one" : "tokens_minus_one";
}

LossKind parse_loss_kind(std::string_view s) {
  for (auto k : {LossKind::dispersion, LossKind::decorrelation, LossKind::l2_repel,
                 LossKind::orthogonalization}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown loss kind '" + std::string(s) + "'");
}

LayerAggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return LayerAggregation::mean;
  if (s == "sum") return LayerAggregation::sum;
  throw std::invalid_argument("unknown layer aggregation '" + std::string(s) + "'");
}

CovarianceDivisor parse_divisor(std::string_view s) {
  if (s == "dim_minus_one") return CovarianceDivisor::dim_minus_one;
  if (s == "tokens_minus_one") return CovarianceDivisor::tokens_minus_one;
  throw std::invalid_argument("unknown covariance divisor '" + std::string(s) + "'");
}

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("loss.tau must be > 0");
  if (!(lambda_disp >= 0.0)) throw std::invalid_argument("loss.lambda_disp must be >= 0");
  if (!(lambda_norm >= 0.0)) throw std::invalid_argument("loss.lambda_norm must be >= 0");
  if (!(clamp_eps > 0.0 && clamp_eps <= 1e-3)) {
    throw std::invalid_argument("loss.clamp_eps must be in (0, 1e-3]");
  }
}

double angular_distance(double cosine, double clamp_eps) {
  return std::acos(std::clamp(cosine, -1.0 + clamp_eps, 1.0 - clamp_eps)) / std::numbers::pi;
}

namespace {

template <typename T>
void require_tokens(Var<T> z, const char* name) {
  const auto& s = z.shape();
  if (s.size() < 2) throw ShapeError(name, {s});
  if (s[s.size() - 2] < 2) throw std::invalid_argument(std::string(name) + ": need N >= 2 tokens");
}

template <typename T>
Var<T> normalize_rows(Var<T> z, T eps) {
  const std::size_t d = z.shape().back();
  auto norms = maximum(sqrt(sum(square(z), -1)), eps);
  return div(z, repeat_last(norms, d));
}

// Off-diagonal angular distances [..., N(N-1)].
template <typename T>
Var<T> pair_distances(Var<T> z, T clamp_eps) {
  auto zn = normalize_rows(z, clamp_eps);
  auto cos = clamp(matmul(zn, transpose(zn)), T{-1} + clamp_eps, T{1} - clamp_eps);
  return offdiag(scale(arccos(cos), static_cast<T>(1.0 / std::numbers::pi)));
}

}  // namespace

template <typename T>
Var<T> log_mean_exp(Var<T> logits) {
  const auto count = static_cast<T>(logits.shape().back());
  return add_scalar(logsumexp(logits, -1), -std::log(count));
}

template <typename T>
Var<T> dispersion_loss(Var<T> z, T tau, T clamp_eps) {
  require_tokens(z, "dispersion_loss");
  auto logits = scale(pair_distances(z, clamp_eps), T{-1} / tau);
  return mean_all(log_mean_exp(logits));
}

template <typename T>
Var<T> decorrelation_loss(Var<T> z, CovarianceDivisor divisor) {
  require_tokens(z, "decorrelation_loss");
  const std::size_t n = z.shape()[z.shape().size() - 2];
  const std::size_t d = z.shape().back();
  if (d < 2) throw std::invalid_argument("decorrelation_loss: need d >= 2");
  // Per-dimension statistics over the token axis, broadcast back as [..., N, d].
  auto mu = transpose(repeat_last(mean(z, -2), n));
  auto centered = sub(z, mu);
  auto sigma = maximum(sqrt(mean(square(centered), -2)), static_cast<T>(kStdGuard));
  auto standardized = div(centered, transpose(repeat_last(sigma, n)));
  const T denom = static_cast<T>(divisor == CovarianceDivisor::dim_minus_one ? d - 1 : n - 1);
  auto cov = scale(matmul(transpose(standardized), standardized), T{1} / denom);
  return mean_all(sum(square(offdiag(cov)), -1));
}

template <typename T>
Var<T> l2_repel_loss(Var<T> z, T tau, T lambda_norm) {
  require_tokens(z, "l2_repel_loss");
  const std::size_t n = z.shape()[z.shape().size() - 2];
  auto sq = sum(square(z), -1);
  auto r = repeat_last(sq, n);
  auto gram = matmul(z, transpose(z));
  auto dist2 = sub(add(r, transpose(r)), scale(gram, T{2}));
  auto repel = log_mean_exp(scale(offdiag(dist2), T{-1} / tau));
  auto per_sequence = add(repel, scale(sum(sq, -1), lambda_norm));
  return mean_all(per_sequence);
}

template <typename T>
Var<T> orthogonalization_loss(Var<T> z, T clamp_eps) {
  require_tokens(z, "orthogonalization_loss");
  auto hinge = maximum(add_scalar(scale(pair_distances(z, clamp_eps), T{-1}), T{0.5}), T{0});
  return mean_all(mean(square(hinge), -1));
}

template <typename T>
Var<T> kd_loss(Var<T> teacher_logits, Var<T> student_logits, T tau) {
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.shape().empty()) {
    throw ShapeError("kd_loss", {teacher_logits.shape(), student_logits.shape()});
  }
  if (!(tau > T{0})) throw std::invalid_argument("kd_loss: tau must be > 0");
  const std::size_t v = teacher_logits.shape().back();
  if (v < 2) throw std::invalid_argument("kd_loss: need V >= 2");
  auto p_teacher = softmax(scale(teacher_logits, T{1} / tau));
  auto s = scale(student_logits, T{1} / tau);
  auto log_p_student = sub(s, repeat_last(logsumexp(s, -1), v));
  auto cross = sum(mul(p_teacher, log_p_student), -1);
  return scale(mean_all(cross), -tau * tau);
}

template <typename T>
Var<T> family_loss(Var<T> z, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::dispersion:
      return dispersion_loss(z, static_cast<T>(cfg.tau), static_cast<T>(cfg.clamp_eps));
    case LossKind::decorrelation:
      return decorrelation_loss(z, cfg.covariance_divisor);
    case LossKind::l2_repel:
      return l2_repel_loss(z, static_cast<T>(cfg.tau), static_cast<T>(cfg.lambda_norm));
    case LossKind::orthogonalization:
      return orthogonalization_loss(z, static_cast<T>(cfg.clamp_eps));
  }
  throw std::logic_error("unreachable loss kind");
}

template <typename T>
Var<T> aggregate_family_loss(std::span<const Var<T>> layers, const LossConfig& cfg) {
  if (layers.empty()) throw std::invalid_argument("dispersion regularizer needs at least one layer");
  Var<T> acc = family_loss(layers[0], cfg);
  for (std::size_t l = 1; l < layers.size(); ++l) acc = add(acc, family_loss(layers[l], cfg));
  if (cfg.layer_aggregation == LayerAggregation::mean && layers.size() > 1) {
    acc = scale(acc, T{1} / static_cast<T>(layers.size()));
  }
  return acc;
}

template <typename T>
Var<T> combined_objective(Var<T> train_loss, std::span<const Var<T>> layers, const LossConfig& cfg) {
  if (cfg.lambda_disp == 0.0) return train_loss;
  if (layers.empty()) {
    throw std::invalid_argument("combined objective: lambda_disp > 0 with an empty layer list");
  }
  return add(train_loss, scale(aggregate_family_loss(layers, cfg), static_cast<T>(cfg.lambda_disp)));
}

// ---------------------------------------------------------------------------

namespace {
template <typename F>
double on_graph(const TensorD& z, F&& f) {
  Graph<double> g;
  return f(g.constant(z)).value().item();
}
}  // namespace

LossResult evaluate_family_loss(std::span<const TensorD> layers, const LossConfig& cfg) {
  if (layers.empty()) throw std::invalid_argument("evaluate_family_loss: no layers");
  LossResult r;
  for (const auto& z : layers) {
    r.per_layer.push_back(on_graph(z, [&](Var<double> v) { return family_loss(v, cfg); }));
  }
  double acc = 0.0;
  for (double v : r.per_layer) acc += v;
  r.value = cfg.layer_aggregation == LayerAggregation::mean
                ? acc / static_cast<double>(r.per_layer.size())
                : acc;
  return r;
}

double log_mean_exp(std::span<const double> logits) {
  return on_graph(TensorD(Shape{logits.size()}, std::vector<double>(logits.begin(), logits.end())),
                  [](Var<double> v) { return log_mean_exp(v); });
}

double dispersion_loss(const TensorD& z, double tau, double clamp_eps) {
  return on_graph(z, [&](Var<double> v) { return dispersion_loss(v, tau, clamp_eps); });
}

double dispersion_loss_logsum(const TensorD& z, double tau, double clamp_eps) {
  const double n = static_cast<double>(z.dim_back(2));
  return dispersion_loss(z, tau, clamp_eps) + std::log(n * (n - 1.0));
}

double decorrelation_loss(const TensorD& z, CovarianceDivisor divisor) {
  return on_graph(z, [&](Var<double> v) { return decorrelation_loss(v, divisor); });
}

double l2_repel_loss(const TensorD& z, double tau, double lambda_norm) {
  return on_graph(z, [&](Var<double> v) { return l2_repel_loss(v, tau, lambda_norm); });
}

double orthogonalization_loss(const TensorD& z, double clamp_eps) {
  return on_graph(z, [&](Var<double> v) { return orthogonalization_loss(v, clamp_eps); });
}

double kd_loss(const TensorD& teacher_logits, const TensorD& student_logits, double tau) {
  Graph<double> g;
  return kd_loss(g.constant(teacher_logits), g.constant(student_logits), tau).value().item();
}

#define CONDENSE_INSTANTIATE(T)                                                             \
  template Var<T> log_mean_exp(Var<T>);                                                     \
  template Var<T> dispersion_loss(Var<T>, T, T);                                            \
  template Var<T> decorrelation_loss(Var<T>, CovarianceDivisor);                            \
  template Var<T> l2_repel_loss(Var<T>, T, T);                                              \
  template Var<T> orthogonalization_loss(Var<T>, T);                                        \
  template Var<T> kd_loss(Var<T>, Var<T>, T);                                               \
  template Var<T> family_loss(Var<T>, const LossConfig&);                                   \
  template Var<T> aggregate_family_loss(std::span<const Var<T>>, const LossConfig&);        \
  template Var<T> combined_objective(Var<T>, std::span<const Var<T>>, const LossConfig&);

CONDENSE_INSTANTIATE(float)
CONDENSE_INSTANTIATE(double)

#undef CONDENSE_INSTANTIATE

}  // namespace condense
