#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace condense {

/// One autodiff-vs-finite-difference comparison at 64-bit.
struct GradcheckCase {
  std::string name;
  std::string shape;
  std::size_t coordinates = 0;
  double rel_error = 0.0;
  bool passed = false;
};

inline constexpr double kGradcheckTolerance = 1e-4;

/// Every loss of the dispersion family, the KD loss (both arguments), and a
/// transformer probe (cross-entropy plus dispersion over all parameters of a
/// small model), each on seeded random inputs.
std::vector<GradcheckCase> run_gradcheck_suite(std::uint64_t seed, double tolerance = kGradcheckTolerance);

}  // namespace condense
