#pragma once

#include <functional>
#include <stdexcept>
#include <string>

#include "condense/tensor.hpp"

namespace condense {

class NonFiniteProbe : public std::runtime_error {
 public:
  NonFiniteProbe(std::size_t coordinate, double value);
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

using ScalarFn = std::function<double(const TensorD&)>;

/// Central difference (f(x + h e_k) - f(x - h e_k)) / 2h for every coordinate k.
TensorD finite_difference_gradient(const ScalarFn& f, const TensorD& x, double h = 1e-6);

/// ||a - b|| / max(||a||, ||b||, floor), Euclidean norms over all coordinates.
double relative_error(const TensorD& a, const TensorD& b, double floor = 1e-12);

}  // namespace condense
