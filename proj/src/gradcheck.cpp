#include "condense/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace condense {

NonFiniteProbe::NonFiniteProbe(std::size_t coordinate, double value)
    : std::runtime_error("finite difference: non-finite function value " + std::to_string(value) +
                         " when probing coordinate " + std::to_string(coordinate)),
      coordinate_(coordinate) {}

TensorD finite_difference_gradient(const ScalarFn& f, const TensorD& x, double h) {
  TensorD grad(x.shape());
  TensorD probe = x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const double fp = f(probe);
    if (!std::isfinite(fp)) throw NonFiniteProbe(k, fp);
    probe[k] = orig - h;
    const double fm = f(probe);
    if (!std::isfinite(fm)) throw NonFiniteProbe(k, fm);
    probe[k] = orig;
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double relative_error(const TensorD& a, const TensorD& b, double floor) {
  if (a.shape() != b.shape()) throw ShapeError("relative_error", {a.shape(), b.shape()});
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace condense
