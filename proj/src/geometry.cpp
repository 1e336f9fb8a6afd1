#include "condense/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace condense {

void EmbeddingTrace::validate() const {
  if (layers.size() < 2) {
    throw std::invalid_argument("trace '" + sequence_id + "': need embedding layer plus >= 1 block");
  }
  const Shape& s0 = layers.front().shape();
  if (s0.size() != 2) throw ShapeError("trace", {s0});
  for (const auto& l : layers) {
    if (l.shape() != s0) throw ShapeError("trace (layer shapes differ)", {s0, l.shape()});
  }
  if (final_norm && final_norm->shape() != s0) {
    throw ShapeError("trace (final-norm shape)", {s0, final_norm->shape()});
  }
}

TensorD cosine_matrix(const TensorD& z, double eps) {
  if (z.rank() != 2) throw ShapeError("cosine_matrix", {z.shape()});
  const std::size_t n = z.dim(0), d = z.dim(1);
  if (d == 0) throw std::invalid_argument("cosine_matrix: embedding dimension is 0");
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : row(z, i)) s += v * v;
    norms[i] = std::max(std::sqrt(s), eps);
  }
  TensorD out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const auto zi = row(z, i);
    for (std::size_t j = i; j < n; ++j) {
      const auto zj = row(z, j);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += zi[k] * zj[k];
      const double c = std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
      out.at(i, j) = c;
      out.at(j, i) = c;
    }
  }
  return out;
}

double mean_similarity(const TensorD& z) {
  const TensorD c = cosine_matrix(z);
  const std::size_t n = c.dim(0);
  if (n < 2) throw std::invalid_argument("mean similarity needs N >= 2 tokens");
  double s = 0.0;
  for (double v : c.data()) s += v;
  return s / static_cast<double>(n * n);
}

std::vector<double> layer_mean_similarity(const EmbeddingTrace& trace) {
  trace.validate();
  std::vector<double> mu;
  mu.reserve(trace.layers.size());
  for (const auto& l : trace.layers) mu.push_back(mean_similarity(l.cast<double>()));
  return mu;
}

HistogramStack histogram_stack(const EmbeddingTrace& trace, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
  trace.validate();
  HistogramStack h;
  h.edges.resize(bins + 1);
  const double width = 2.0 / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = -1.0 + width * static_cast<double>(b);
  h.edges.back() = 1.0;
  for (const auto& layer : trace.layers) {
    const TensorD c = cosine_matrix(layer.cast<double>());
    std::vector<double> counts(bins, 0.0);
    for (double v : c.data()) {
      auto idx = static_cast<std::size_t>(std::max(0.0, std::floor((v + 1.0) / width)));
      counts[std::min(idx, bins - 1)] += 1.0;
    }
    const double total = static_cast<double>(c.size());
    for (auto& f : counts) f /= total;
    h.frequency.push_back(std::move(counts));
  }
  return h;
}

namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("correlation: series lengths differ");
  if (x.size() < 2) throw std::invalid_argument("correlation: need at least 2 points");
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation();
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Sum of t(t-1)/2 over runs of equal values in an already sorted sequence.
template <typename Eq>
std::uint64_t tied_pairs(std::size_t n, Eq same) {
  std::uint64_t total = 0, run = 1;
  for (std::size_t i = 1; i < n; ++i) {
    if (same(i - 1, i)) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total + run * (run - 1) / 2;
}

// Stable merge sort counting inversions.
std::uint64_t sort_count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo,
                               std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::uint64_t swaps = sort_count_swaps(v, buf, lo, mid) + sort_count_swaps(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += mid - i;
      buf[k++] = v[j++];
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<long>(lo), buf.begin() + static_cast<long>(hi),
            v.begin() + static_cast<long>(lo));
  return swaps;
}

}  // namespace

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });
  const std::uint64_t n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;
  const std::uint64_t tx = tied_pairs(n, [&](auto a, auto b) { return x[order[a]] == x[order[b]]; });
  const std::uint64_t txy = tied_pairs(n, [&](auto a, auto b) {
    return x[order[a]] == x[order[b]] && y[order[a]] == y[order[b]];
  });
  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  const std::uint64_t discordant = sort_count_swaps(ys, buf, 0, n);
  const std::uint64_t ty = tied_pairs(n, [&](auto a, auto b) { return ys[a] == ys[b]; });
  if (tx == n0 || ty == n0) throw UndefinedCorrelation();
  const double concordant =
      static_cast<double>(n0) - static_cast<double>(tx) - static_cast<double>(ty) +
      static_cast<double>(txy) - static_cast<double>(discordant);
  // One sqrt of the product keeps tie-free results at exactly +-1.
  const double denom = std::sqrt(static_cast<double>(n0 - tx) * static_cast<double>(n0 - ty));
  return std::clamp((concordant - static_cast<double>(discordant)) / denom, -1.0, 1.0);
}

CondensationSummary summarize_mu(double layer0_mu, std::vector<double> mu,
                                 std::optional<double> final_norm_mu, std::size_t n_sequences) {
  CondensationSummary s;
  s.layer0_mu = layer0_mu;
  s.final_norm_mu = final_norm_mu;
  s.n_sequences = n_sequences;
  if (mu.size() >= 2) {
    std::vector<double> depth(mu.size());
    std::iota(depth.begin(), depth.end(), 1.0);
    try {
      s.spearman_rho = spearman_rho(depth, mu);
      s.kendall_tau = kendall_tau(depth, mu);
    } catch (const UndefinedCorrelation&) {
      s.spearman_rho.reset();
      s.kendall_tau.reset();
    }
  }
  s.mu = std::move(mu);
  return s;
}

CondensationSummary condensation_summary(std::span<const EmbeddingTrace> traces) {
  if (traces.empty()) throw std::invalid_argument("condensation summary needs at least one trace");
  std::vector<const EmbeddingTrace*> sorted;
  for (const auto& t : traces) sorted.push_back(&t);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](auto* a, auto* b) { return a->sequence_id < b->sequence_id; });

  const std::size_t layers = sorted.front()->layers.size();
  const bool with_final = std::all_of(sorted.begin(), sorted.end(),
                                      [](auto* t) { return t->final_norm.has_value(); });
  // Running means: repeated identical inputs reproduce the single-trace value exactly.
  std::vector<double> mean(layers, 0.0);
  double final_mean = 0.0;
  std::size_t count = 0;
  for (const auto* t : sorted) {
    if (t->layers.size() != layers) {
      throw std::invalid_argument("trace '" + t->sequence_id + "' has " +
                                  std::to_string(t->layers.size()) + " layers, expected " +
                                  std::to_string(layers));
    }
    const auto mu = layer_mean_similarity(*t);
    ++count;
    const double w = 1.0 / static_cast<double>(count);
    for (std::size_t l = 0; l < layers; ++l) mean[l] += (mu[l] - mean[l]) * w;
    if (with_final) final_mean += (mean_similarity(t->final_norm->cast<double>()) - final_mean) * w;
  }
  std::vector<double> blocks(mean.begin() + 1, mean.end());
  return summarize_mu(mean[0], std::move(blocks),
                      with_final ? std::optional<double>(final_mean) : std::nullopt, count);
}

}  // namespace condense
