#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tlab/ops.hpp"

namespace tlab {

enum class AttnScaleMode {
  embed_dim,  // divide scores by sqrt(m), the token embedding dimension
  head_dim,  // divide by sqrt(r), the per-head projection dimension
};

// Projections of a single head. Bias tensors are undefined when disabled.
template <typename T>
struct HeadWeights {
  Tensor<T> wq, wk, wv;
  Tensor<T> bq, bk, bv;
};

// All heads of one attention layer. Per-head projections are stored side by
// side: head k owns columns [k*head_dim, (k+1)*head_dim) of wq, wk and wv.
template <typename T>
struct MultiHeadWeights {
  std::size_t heads = 1;
  std::size_t head_dim = 0;
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> bq, bk, bv, bo;

  static MultiHeadWeights init(std::size_t query_width, std::size_t value_width,
                               std::size_t out_width, std::size_t heads, std::size_t head_dim,
                               bool bias, std::mt19937_64& rng);

  std::size_t query_width() const { return wq.shape().rows(); }
  std::size_t value_width() const { return wv.shape().rows(); }
  std::size_t out_width() const { return wo.shape().cols(); }

  // Copy of head k's slices.
  HeadWeights<T> head(std::size_t k) const;

  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;  // [1 x d], starts at 1
  Tensor<T> bias;  // [1 x d], starts at 0

  static LayerNormParams init(std::size_t width);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;
};

template <typename T>
struct FfnWeights {
  Tensor<T> w_in;   // [d x s]
  Tensor<T> b_in;   // [1 x s]
  Tensor<T> w_out;  // [s x d]
  Tensor<T> b_out;  // [1 x d]

  static FfnWeights init(std::size_t width, std::size_t hidden, bool bias, std::mt19937_64& rng);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;
};

// Intermediate tensors of one attention layer, recorded on request.
template <typename T>
struct AttentionTrace {
  Tensor<T> value_input;   // the V argument as received
  Tensor<T> heads_concat;  // [H_1 ... H_p] before the output projection
};

// softmax(Q K^T / sqrt(scale_dim) + mask) V. `mask` may be undefined, a
// matrix shared by every batch slice, or one matrix per slice.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t scale_dim, const Tensor<T>& mask = {});

// [n x n] additive mask: -inf above the diagonal, 0 elsewhere.
template <typename T>
Tensor<T> causal_mask(std::size_t n);

// [batch x nq x nk] additive mask hiding keys at or beyond key_lengths[b],
// plus future keys when causal. Undefined when nothing needs masking.
template <typename T>
Tensor<T> attention_mask(std::size_t batch, std::size_t nq, std::size_t nk,
                         std::span<const std::size_t> key_lengths, bool causal);

// Standard multi-head attention; query, key and value share one width.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const MultiHeadWeights<T>& w, std::size_t scale_dim,
                               const Tensor<T>& mask = {}, AttentionTrace<T>* trace = nullptr);

// Attention whose queries and keys are the width-2m stream while the value
// is a width-m normalized token embedding; projects back to width 2m.
template <typename T>
Tensor<T> proposed_multi_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v_embed,
                              const MultiHeadWeights<T>& w, std::size_t scale_dim,
                              const Tensor<T>& mask = {}, AttentionTrace<T>* trace = nullptr);

// Row standardization followed by elementwise gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& params);

// relu(x W_in + b_in) W_out + b_out
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FfnWeights<T>& w);

}  // namespace tlab
