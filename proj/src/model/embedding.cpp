#include "tlab/embedding.hpp"

#include <cmath>

namespace tlab {

template <typename T>
Tensor<T> glorot_uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double gain) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<T> values(rows * cols);
  for (auto& v : values) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit);
  return Tensor<T>(Shape{rows, cols}, std::move(values), true);
}

template <typename T>
Tensor<T> token_embed(const Tensor<T>& table, std::span<const TokenId> ids, std::size_t batch) {
  return gather_rows(table, ids, batch);
}

template <typename T>
Tensor<T> positional_encoding(std::size_t n, std::size_t m) {
  if (m == 0 || m % 2 != 0) {
    throw ConfigError("positional encoding needs an even dimension, got " + std::to_string(m));
  }
  std::vector<T> values(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < m; ++j) {
      const double col = static_cast<double>(j + 1);
      const double angle = pos / std::pow(10000.0, 2.0 * col / static_cast<double>(m));
      values[i * m + j] = static_cast<T>(j < m / 2 ? std::sin(angle) : std::cos(angle));
    }
  }
  return Tensor<T>(Shape{n, m}, std::move(values));
}

template <typename T>
PositionalTable<T>::PositionalTable(std::size_t max_len, std::size_t m)
    : max_len_(max_len), dim_(m), table_(positional_encoding<T>(max_len, m)) {}

template <typename T>
Tensor<T> PositionalTable<T>::rows(std::size_t n) const {
  if (n > max_len_) {
    throw InputError("sequence of length " + std::to_string(n) + " exceeds max_len " +
                     std::to_string(max_len_));
  }
  auto all = table_.values();
  return Tensor<T>(Shape{n, dim_}, std::vector<T>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n * dim_)));
}

template <typename T>
Tensor<T> PositionalTable<T>::batched(std::size_t batch, std::size_t n) const {
  const Tensor<T> block = rows(n);
  std::vector<T> values;
  values.reserve(batch * block.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    values.insert(values.end(), block.values().begin(), block.values().end());
  }
  return Tensor<T>(Shape{batch, n, dim_}, std::move(values));
}

template <typename T>
Tensor<T> token_normalize(const Tensor<T>& x, std::span<const std::size_t> lengths) {
  return standardize_cols(x, static_cast<T>(kNormEps), lengths);
}

template <typename T>
Tensor<T> token_normalize_prefix(const Tensor<T>& x, std::span<const std::size_t> lengths) {
  return standardize_cols_prefix(x, static_cast<T>(kNormEps), lengths);
}

template <typename T>
Tensor<T> concat_embed(const Tensor<T>& x_norm, const Tensor<T>& positional) {
  if (!(x_norm.shape() == positional.shape())) {
    throw DimensionError("concat_embed: embedding " + x_norm.shape().str() +
                         " and positional " + positional.shape().str() + " differ");
  }
  return concat_cols(x_norm, positional);
}

template <typename T>
Tensor<T> baseline_embed_input(const Tensor<T>& x_e, const Tensor<T>& positional, std::size_t m,
                               EmbedScaleMode mode) {
  if (!(x_e.shape() == positional.shape())) {
    throw DimensionError("baseline_embed_input: embedding " + x_e.shape().str() +
                         " and positional " + positional.shape().str() + " differ");
  }
  const double root = std::sqrt(static_cast<double>(m));
  const T factor = static_cast<T>(mode == EmbedScaleMode::divide ? 1.0 / root : root);
  return add(scale(x_e, factor), positional);
}

#define TLAB_INSTANTIATE_EMBEDDING(T)                                                      \
  template Tensor<T> glorot_uniform<T>(std::size_t, std::size_t, std::mt19937_64&, double);        \
  template Tensor<T> token_embed(const Tensor<T>&, std::span<const TokenId>, std::size_t); \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                     \
  template class PositionalTable<T>;                                                       \
  template Tensor<T> token_normalize(const Tensor<T>&, std::span<const std::size_t>);      \
  template Tensor<T> token_normalize_prefix(const Tensor<T>&, std::span<const std::size_t>); \
  template Tensor<T> concat_embed(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> baseline_embed_input(const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                          EmbedScaleMode);

TLAB_INSTANTIATE_EMBEDDING(float)
TLAB_INSTANTIATE_EMBEDDING(double)

#undef TLAB_INSTANTIATE_EMBEDDING

}  // namespace tlab
