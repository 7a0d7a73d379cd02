#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "tlab/ops.hpp"

namespace tlab {

// Divisor guard inside token normalization and layer normalization.
inline constexpr double kNormEps = 1e-6;

// Leaf weight matrix drawn from U(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double gain = 1.0);

// Rows of the embedding table selected by ids (rank 3 when batch > 0).
template <typename T>
Tensor<T> token_embed(const Tensor<T>& table, std::span<const TokenId> ids,
                      std::size_t batch = 0);

// Sinusoidal table with 1-based (i, j): columns j <= m/2 hold
// sin(i / 10000^(2j/m)), columns j > m/2 hold cos(i / 10000^(2j/m)).
template <typename T>
Tensor<T> positional_encoding(std::size_t n, std::size_t m);

// Precomputed positional rows up to a maximum length; prefixes are exact.
template <typename T>
class PositionalTable {
 public:
  PositionalTable() = default;
  PositionalTable(std::size_t max_len, std::size_t m);

  std::size_t max_len() const { return max_len_; }
  std::size_t dim() const { return dim_; }
  const Tensor<T>& table() const { return table_; }

  // First n rows, [n x m].
  Tensor<T> rows(std::size_t n) const;
  // First n rows repeated over a batch, [batch x n x m].
  Tensor<T> batched(std::size_t batch, std::size_t n) const;

 private:
  std::size_t max_len_ = 0;
  std::size_t dim_ = 0;
  Tensor<T> table_;
};

// Column-wise standardization of a token embedding matrix (mean 0,
// population variance 1, divisor sqrt(var + kNormEps)). For rank-3 input the
// statistics are per sequence over its first lengths[b] rows.
template <typename T>
Tensor<T> token_normalize(const Tensor<T>& x, std::span<const std::size_t> lengths = {});

// Causal token normalization: row i uses the statistics of rows 0..i.
template <typename T>
Tensor<T> token_normalize_prefix(const Tensor<T>& x, std::span<const std::size_t> lengths = {});

// [x_norm  P]: normalized embedding on the left, positional block on the right.
template <typename T>
Tensor<T> concat_embed(const Tensor<T>& x_norm, const Tensor<T>& positional);

enum class EmbedScaleMode { divide, multiply };

// scale * x_e + P with scale = 1/sqrt(m) (divide) or sqrt(m) (multiply).
template <typename T>
Tensor<T> baseline_embed_input(const Tensor<T>& x_e, const Tensor<T>& positional, std::size_t m,
                               EmbedScaleMode mode = EmbedScaleMode::divide);

}  // namespace tlab
