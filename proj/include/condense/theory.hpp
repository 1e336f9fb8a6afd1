#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace condense {

/// Cosine similarity of two vectors; throws std::invalid_argument on a zero vector.
double cosine(std::span<const double> x, std::span<const double> y);

struct RepeatPadResult {
  double before = 0.0;
  double after = 0.0;
  double max_abs_diff = 0.0;
};

/// Cosine similarity before and after k-fold concatenation of x and y.
RepeatPadResult repeat_pad_check(std::span<const double> x, std::span<const double> y, std::size_t k);

/// Monte-Carlo estimate of E[r / sqrt(r^2 + U)], U ~ chi^2_m, with U drawn
/// as a sum of m squared standard normals.
struct AlphaEstimate {
  double r = 0.0;
  std::size_t m = 0;
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t trials = 0;

  double lower_bound() const;  // r / sqrt(r^2 + m)
  double upper_bound() const;  // r / sqrt(r^2 + m - 1)
};

AlphaEstimate alpha_mc(double r, std::size_t m, std::size_t trials, std::uint64_t seed);

struct PadExpectation {
  double mc_mean = 0.0;
  double mc_stderr = 0.0;
  double predicted = 0.0;         // cos_d(x, y) * alpha(|x|) * alpha(|y|)
  double predicted_stderr = 0.0;  // delta-method stderr of the product
  double base_cosine = 0.0;
  bool outside_assumption = false;  // base cosine < 0

  double combined_stderr() const;
};

/// Average cosine of (x, eps) and (y, eta) with eps, eta ~ N(0, I_m), next to
/// the factorized prediction built from independently seeded alpha estimates.
PadExpectation gaussian_pad_expectation_mc(std::span<const double> x, std::span<const double> y,
                                           std::size_t m, std::size_t trials, std::uint64_t seed);

/// Outcome of one verification check. Estimates from fewer trials than
/// kMinConclusiveTrials are reported inconclusive rather than failed.
enum class CheckStatus { pass, fail, inconclusive };
std::string_view to_string(CheckStatus s);

inline constexpr std::size_t kMinConclusiveTrials = 10'000;
inline constexpr double kStderrSlack = 4.0;

struct CheckRecord {
  std::string name;
  std::string params;
  double estimate = 0.0;
  double stderr_ = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  CheckStatus status = CheckStatus::pass;
  std::string note;
};

struct TheoryGrid {
  std::vector<double> radii{0.5, 1.0, 2.0, 8.0};
  std::vector<std::size_t> pads{1, 4, 16, 832};
  std::size_t trials = 100'000;
  std::uint64_t seed = 0;
  std::size_t repeat_pairs = 100;
  std::size_t repeat_max_dim = 16;
  std::size_t repeat_max_k = 5;
  std::size_t gpt2_base_dim = 768;
  std::size_t gpt2_large_dim = 1600;
};

/// Repeat-padding sweep: max |cos_D - cos_d| over random pairs must be <= 1e-12.
std::vector<CheckRecord> verify_repeat_padding(const TheoryGrid& grid);
/// Strict alpha bounds at every (r, m) grid point, with kStderrSlack standard errors of slack.
std::vector<CheckRecord> verify_alpha_bounds(const TheoryGrid& grid);
/// Unit x = y padded from the base to the large dimension: expectation in (1/(m+1), 1/m).
CheckRecord verify_gpt2_example(const TheoryGrid& grid);
/// MC padded cosine vs factorized prediction for a few fixed pairs.
std::vector<CheckRecord> verify_factorization(const TheoryGrid& grid);

}  // namespace condense
