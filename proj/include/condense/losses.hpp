#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "condense/graph.hpp"
#include "condense/tensor.hpp"

namespace condense {

enum class LossKind { dispersion, decorrelation, l2_repel, orthogonalization };
enum class LayerAggregation { mean, sum };
/// Divisor of the decorrelation covariance: d-1 (literal form) or N-1.
enum class CovarianceDivisor { dim_minus_one, tokens_minus_one };

std::string_view to_string(LossKind k);
std::string_view to_string(LayerAggregation a);
std::string_view to_string(CovarianceDivisor d);
LossKind parse_loss_kind(std::string_view s);
LayerAggregation parse_aggregation(std::string_view s);
CovarianceDivisor parse_divisor(std::string_view s);

struct LossConfig {
  LossKind kind = LossKind::dispersion;
  double tau = 1.0;
  double lambda_disp = 0.1;
  double lambda_norm = 1e-4;
  double clamp_eps = 1e-6;
  LayerAggregation layer_aggregation = LayerAggregation::mean;
  CovarianceDivisor covariance_divisor = CovarianceDivisor::dim_minus_one;

  /// Throws std::invalid_argument on tau <= 0, negative weights, or clamp_eps outside (0, 1e-3].
  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

/// Guard used when standardizing decorrelation columns.
inline constexpr double kStdGuard = 1e-8;

/// arccos(clamp(c, -1+eps, 1-eps)) / pi.
double angular_distance(double cosine, double clamp_eps);

// Graph forms. z is [N, d] or batched [B, N, d]; batched inputs produce the
// per-sequence loss averaged over the batch. All pair sums run over ordered
// pairs i != j.

/// log(mean(exp(x))) over the last axis, as logsumexp(x) - log(count).
template <typename T> Var<T> log_mean_exp(Var<T> logits);

/// log-mean-exp of -D(z_i, z_j) / tau, the numerically stable runtime form.
template <typename T> Var<T> dispersion_loss(Var<T> z, T tau, T clamp_eps);
/// sum_{m != n} C_mn^2 with C the covariance of column-standardized z.
template <typename T> Var<T> decorrelation_loss(Var<T> z, CovarianceDivisor divisor);
/// log-mean-exp of -||z_i - z_j||^2 / tau plus lambda_norm * ||z||_F^2.
template <typename T> Var<T> l2_repel_loss(Var<T> z, T tau, T lambda_norm);
/// Mean of max(0, 1/2 - D(z_i, z_j))^2.
template <typename T> Var<T> orthogonalization_loss(Var<T> z, T clamp_eps);
/// -tau^2 sum_a softmax(teacher/tau)_a log softmax(student/tau)_a, averaged over leading rows.
template <typename T> Var<T> kd_loss(Var<T> teacher_logits, Var<T> student_logits, T tau);

/// The configured member of the dispersion family applied to one layer.
template <typename T> Var<T> family_loss(Var<T> z, const LossConfig& cfg);

/// train_loss + lambda_disp * aggregate over layers of family_loss. Returns
/// train_loss itself when lambda_disp == 0.
template <typename T>
Var<T> combined_objective(Var<T> train_loss, std::span<const Var<T>> layers, const LossConfig& cfg);

/// Aggregate of family_loss over layers, as used inside combined_objective.
template <typename T>
Var<T> aggregate_family_loss(std::span<const Var<T>> layers, const LossConfig& cfg);

struct LossResult {
  double value = 0.0;
  std::vector<double> per_layer;
};

/// Tensor-level evaluation at 64-bit: per-layer family losses and their aggregate.
LossResult evaluate_family_loss(std::span<const TensorD> layers, const LossConfig& cfg);

double log_mean_exp(std::span<const double> logits);
double dispersion_loss(const TensorD& z, double tau = 1.0, double clamp_eps = 1e-6);
/// The log-sum (unnormalized) form; exceeds dispersion_loss by log(N(N-1)).
double dispersion_loss_logsum(const TensorD& z, double tau = 1.0, double clamp_eps = 1e-6);
double decorrelation_loss(const TensorD& z,
                          CovarianceDivisor divisor = CovarianceDivisor::dim_minus_one);
double l2_repel_loss(const TensorD& z, double tau = 1.0, double lambda_norm = 0.0);
double orthogonalization_loss(const TensorD& z, double clamp_eps = 1e-6);
double kd_loss(const TensorD& teacher_logits, const TensorD& student_logits, double tau = 1.0);

}  // namespace condense
