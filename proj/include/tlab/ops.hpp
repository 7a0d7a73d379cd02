#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "tlab/tensor.hpp"

namespace tlab {

using TokenId = std::int32_t;

// a[n x k] * b[k x p]. A rank-3 `a` multiplies every batch slice; `b` is
// either rank 2 (shared by all slices) or rank 3 with the same batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// a[n x k] * b[p x k]^T, same batching rules as matmul.
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise sum. `b` may equal a's shape, be a row vector matching a's
// column count, or (for rank-3 `a`) a rank-2 tensor matching one batch slice.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// Elementwise product with the same broadcasting rules as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> relu(const Tensor<T>& a);

// Softmax over the last axis. -inf entries get exactly zero weight; a row
// that is entirely -inf raises NumericalError.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a);

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t width);

// Row lookup. With batch > 0 the ids are read as [batch x ids.size()/batch]
// and the result is rank 3.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const TokenId> ids,
                      std::size_t batch = 0);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

// Each row shifted to mean 0 and divided by sqrt(population variance + eps).
template <typename T>
Tensor<T> standardize_rows(const Tensor<T>& a, T eps);

// Column-wise counterpart of standardize_rows, per batch slice. When
// `lengths` is non-empty only the first lengths[b] rows of slice b enter the
// statistics; the remaining rows are output as zeros.
template <typename T>
Tensor<T> standardize_cols(const Tensor<T>& a, T eps,
                           std::span<const std::size_t> lengths = {});

// Causal column standardization: row i of each slice is standardized with
// the mean and population variance of rows 0..i only, so no output row
// depends on later rows. Rows at or beyond lengths[b] are zero.
template <typename T>
Tensor<T> standardize_cols_prefix(const Tensor<T>& a, T eps,
                                  std::span<const std::size_t> lengths = {});

// Inverted dropout; identity when rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, std::mt19937_64& rng);

// Uniform double in [0, 1) from the raw engine output, identical on every
// standard library.
double uniform01(std::mt19937_64& rng);

}  // namespace tlab
