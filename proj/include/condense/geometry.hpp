#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "condense/tensor.hpp"

namespace condense {

/// Per-layer N x d token embeddings for one input sequence.
///
/// layers[0] is the token+position embedding, layers[1..L] the post-residual
/// block outputs. The post-final-norm output, when captured, is kept apart
/// so it never enters the depth index set.
struct EmbeddingTrace {
  std::string sequence_id;
  std::vector<TensorF> layers;
  std::optional<TensorF> final_norm;

  std::size_t block_count() const { return layers.empty() ? 0 : layers.size() - 1; }
  std::size_t token_count() const { return layers.empty() ? 0 : layers.front().dim(0); }
  std::size_t dim() const { return layers.empty() ? 0 : layers.front().dim(1); }

  /// Throws std::invalid_argument unless all matrices share one N x d shape and L >= 1.
  void validate() const;
};

class UndefinedCorrelation : public std::domain_error {
 public:
  UndefinedCorrelation() : std::domain_error("undefined correlation: constant series") {}
};

/// Pairwise cosine similarities of the rows of z [N, d]. Norms are guarded
/// as max(||z_i||, eps), so zero rows have similarity 0 with everything.
TensorD cosine_matrix(const TensorD& z, double eps = 1e-12);

/// Mean over all N^2 ordered pairs of cosine similarity, diagonal included.
double mean_similarity(const TensorD& z);

/// mu for layers 0..L of the trace (final-norm entry excluded).
std::vector<double> layer_mean_similarity(const EmbeddingTrace& trace);

struct HistogramStack {
  std::vector<double> edges;                   // B + 1 edges over [-1, 1]
  std::vector<std::vector<double>> frequency;  // [layer][bin], rows sum to 1

  std::size_t bins() const { return edges.empty() ? 0 : edges.size() - 1; }
};

inline constexpr std::size_t kDefaultBins = 101;

/// Normalized histogram of all N^2 similarities per layer (0..L). A value of
/// exactly 1 lands in the last bin.
HistogramStack histogram_stack(const EmbeddingTrace& trace, std::size_t bins = kDefaultBins);

/// Pearson correlation of average ranks.
double spearman_rho(std::span<const double> x, std::span<const double> y);

/// Tie-corrected Kendall tau-b, O(n log n) via Knight's merge-sort count.
double kendall_tau(std::span<const double> x, std::span<const double> y);

struct CondensationSummary {
  double layer0_mu = 0.0;
  std::vector<double> mu;  // l = 1..L
  std::optional<double> final_norm_mu;
  // Empty when the mu series is constant and the correlation is undefined.
  std::optional<double> spearman_rho;
  std::optional<double> kendall_tau;
  std::size_t n_sequences = 0;

  bool operator==(const CondensationSummary&) const = default;
};

/// Averages mu over traces (reduced in sequence-id order), then correlates
/// mu^(l) with l over the block outputs l = 1..L.
CondensationSummary condensation_summary(std::span<const EmbeddingTrace> traces);

/// Correlations of an already-averaged series against 1..n.
CondensationSummary summarize_mu(double layer0_mu, std::vector<double> mu,
                                 std::optional<double> final_norm_mu, std::size_t n_sequences);

}  // namespace condense
