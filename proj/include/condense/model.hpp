#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "condense/geometry.hpp"
#include "condense/graph.hpp"
#include "condense/tensor.hpp"

namespace condense {

/// Byte-level vocabulary: 256 byte values plus one pad id.
inline constexpr std::size_t kByteVocab = 257;
inline constexpr std::size_t kPadToken = 256;

/// Pre-norm decoder-only transformer with learned absolute positions and an
/// output head tied to the token embedding.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = kByteVocab;
  std::size_t context_len = 128;
  double norm_eps = 1e-5;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors in declaration order (the checkpoint blob order).
template <typename T>
struct Params {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  std::size_t index_of(std::string_view name) const;
  Tensor<T>& operator[](std::string_view name) { return tensors[index_of(name)]; }
  const Tensor<T>& operator[](std::string_view name) const { return tensors[index_of(name)]; }
  std::size_t count() const;

  template <typename U>
  Params<U> cast() const {
    Params<U> out{names, {}};
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
  bool operator==(const Params&) const = default;
};

/// Names and shapes in declaration order.
std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& cfg);

/// Whether a parameter takes decoupled weight decay (matrices only).
bool is_decayed(std::string_view name);

/// Affine weights ~ N(0, 0.02^2), residual-output projections scaled by
/// 1/sqrt(2L), biases 0, norm gains 1. Deterministic in `seed`.
Params<float> init_params(const ModelConfig& cfg, std::uint64_t seed);

template <typename T>
struct ForwardPass {
  Var<T> logits;              // [B, N, V]
  std::vector<Var<T>> layers;  // 0..L, each [B, N, d]
  Var<T> final_norm;          // [B, N, d]
};

/// Builds the forward pass on `graph`. `weights` are graph leaves in
/// declaration order; `tokens` is row-major [batch, seq].
template <typename T>
ForwardPass<T> forward(const ModelConfig& cfg, std::span<const Var<T>> weights,
                       std::span<const std::size_t> tokens, std::size_t batch, std::size_t seq);

/// Mean next-token cross-entropy of logits [B, N, V] against targets [B*N].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::size_t> targets);

struct TracedForward {
  TensorF logits;  // [N, V]
  EmbeddingTrace trace;
};

/// Inference on one sequence, capturing all L+1 layer outputs plus the
/// post-final-norm output.
TracedForward forward_with_trace(const ModelConfig& cfg, const Params<float>& params,
                                 std::span<const std::size_t> tokens,
                                 std::string sequence_id = "seq");

}  // namespace condense
