#include "tlab/attention.hpp"

#include <cmath>
#include <limits>

#include "tlab/embedding.hpp"

namespace tlab {

namespace {

template <typename T>
Tensor<T> zeros_row(std::size_t width) {
  return Tensor<T>(Shape{1, width}, true);
}

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

template <typename T>
Tensor<T> column_block(const Tensor<T>& w, std::size_t start, std::size_t width) {
  const std::size_t rows = w.shape().rows();
  const std::size_t cols = w.shape().cols();
  std::vector<T> values(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) values[r * width + c] = w.values()[r * cols + start + c];
  }
  return Tensor<T>(Shape{rows, width}, std::move(values), true);
}

template <typename T>
Tensor<T> attend_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const MultiHeadWeights<T>& w, std::size_t scale_dim,
                       const Tensor<T>& mask, AttentionTrace<T>* trace) {
  const Tensor<T> qp = project(q, w.wq, w.bq);
  const Tensor<T> kp = project(k, w.wk, w.bk);
  const Tensor<T> vp = project(v, w.wv, w.bv);
  std::vector<Tensor<T>> outputs;
  outputs.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) {
    const std::size_t start = h * w.head_dim;
    outputs.push_back(scaled_dot_attention(slice_cols(qp, start, w.head_dim),
                                           slice_cols(kp, start, w.head_dim),
                                           slice_cols(vp, start, w.head_dim), scale_dim, mask));
  }
  Tensor<T> heads = w.heads == 1 ? outputs.front()
                                 : concat_cols<T>(std::span<const Tensor<T>>(outputs));
  if (trace) {
    trace->value_input = v;
    trace->heads_concat = heads;
  }
  return project(heads, w.wo, w.bo);
}

template <typename T>
void check_head_layout(const MultiHeadWeights<T>& w) {
  if (w.heads == 0 || w.head_dim == 0) {
    throw ConfigError("attention needs at least one head of positive width");
  }
  const std::size_t fused = w.heads * w.head_dim;
  if (w.wq.shape().cols() != fused || w.wk.shape().cols() != fused ||
      w.wv.shape().cols() != fused || w.wo.shape().rows() != fused) {
    throw ConfigError("attention weights do not match " + std::to_string(w.heads) +
                      " heads of width " + std::to_string(w.head_dim));
  }
}

template <typename T>
void check_keys(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.shape().cols() != k.shape().cols()) {
    throw DimensionError("query " + q.shape().str() + " and key " + k.shape().str() +
                         " widths differ");
  }
  if (k.shape().rows() != v.shape().rows() || k.shape().batch() != v.shape().batch()) {
    throw DimensionError("key " + k.shape().str() + " and value " + v.shape().str() +
                         " row counts differ");
  }
}

}  // namespace

template <typename T>
MultiHeadWeights<T> MultiHeadWeights<T>::init(std::size_t query_width, std::size_t value_width,
                                              std::size_t out_width, std::size_t heads,
                                              std::size_t head_dim, bool bias,
                                              std::mt19937_64& rng) {
  MultiHeadWeights w;
  w.heads = heads;
  w.head_dim = head_dim;
  const std::size_t fused = heads * head_dim;
  w.wq = glorot_uniform<T>(query_width, fused, rng);
  w.wk = glorot_uniform<T>(query_width, fused, rng);
  w.wv = glorot_uniform<T>(value_width, fused, rng);
  w.wo = glorot_uniform<T>(fused, out_width, rng);
  if (bias) {
    w.bq = zeros_row<T>(fused);
    w.bk = zeros_row<T>(fused);
    w.bv = zeros_row<T>(fused);
    w.bo = zeros_row<T>(out_width);
  }
  return w;
}

template <typename T>
HeadWeights<T> MultiHeadWeights<T>::head(std::size_t k) const {
  if (k >= heads) throw IndexError("head " + std::to_string(k) + " of " + std::to_string(heads));
  const std::size_t start = k * head_dim;
  HeadWeights<T> h;
  h.wq = column_block(wq, start, head_dim);
  h.wk = column_block(wk, start, head_dim);
  h.wv = column_block(wv, start, head_dim);
  if (bq.defined()) {
    h.bq = column_block(bq, start, head_dim);
    h.bk = column_block(bk, start, head_dim);
    h.bv = column_block(bv, start, head_dim);
  }
  return h;
}

template <typename T>
void MultiHeadWeights<T>::collect(const std::string& prefix,
                                  std::vector<NamedTensor<T>>& out) const {
  out.push_back({prefix + ".wq", wq});
  if (bq.defined()) out.push_back({prefix + ".bq", bq});
  out.push_back({prefix + ".wk", wk});
  if (bk.defined()) out.push_back({prefix + ".bk", bk});
  out.push_back({prefix + ".wv", wv});
  if (bv.defined()) out.push_back({prefix + ".bv", bv});
  out.push_back({prefix + ".wo", wo});
  if (bo.defined()) out.push_back({prefix + ".bo", bo});
}

template <typename T>
LayerNormParams<T> LayerNormParams<T>::init(std::size_t width) {
  return {Tensor<T>::filled(Shape{1, width}, T(1), true), zeros_row<T>(width)};
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix,
                                 std::vector<NamedTensor<T>>& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

template <typename T>
FfnWeights<T> FfnWeights<T>::init(std::size_t width, std::size_t hidden, bool bias,
                                  std::mt19937_64& rng) {
  FfnWeights w;
  w.w_in = glorot_uniform<T>(width, hidden, rng);
  w.w_out = glorot_uniform<T>(hidden, width, rng);
  if (bias) {
    w.b_in = zeros_row<T>(hidden);
    w.b_out = zeros_row<T>(width);
  }
  return w;
}

template <typename T>
void FfnWeights<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
  out.push_back({prefix + ".w_in", w_in});
  if (b_in.defined()) out.push_back({prefix + ".b_in", b_in});
  out.push_back({prefix + ".w_out", w_out});
  if (b_out.defined()) out.push_back({prefix + ".b_out", b_out});
}

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t scale_dim, const Tensor<T>& mask) {
  check_keys(q, k, v);
  if (scale_dim == 0) throw ConfigError("attention scale dimension must be positive");
  Tensor<T> scores = scale(matmul_transposed(q, k),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(scale_dim))));
  if (mask.defined()) scores = add(scores, mask);
  return matmul(softmax_rows(scores), v);
}

template <typename T>
Tensor<T> causal_mask(std::size_t n) {
  std::vector<T> values(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) values[i * n + j] = -std::numeric_limits<T>::infinity();
  }
  return Tensor<T>(Shape{n, n}, std::move(values));
}

template <typename T>
Tensor<T> attention_mask(std::size_t batch, std::size_t nq, std::size_t nk,
                         std::span<const std::size_t> key_lengths, bool causal) {
  if (!key_lengths.empty() && key_lengths.size() != batch) {
    throw DimensionError("attention_mask: " + std::to_string(key_lengths.size()) +
                         " key lengths for batch of " + std::to_string(batch));
  }
  bool padded = false;
  for (std::size_t len : key_lengths) padded = padded || len < nk;
  if (!padded && !causal) return {};
  if (!padded) return causal_mask<T>(nq);
  const T blocked = -std::numeric_limits<T>::infinity();
  std::vector<T> values(batch * nq * nk, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t visible = key_lengths.empty() ? nk : key_lengths[b];
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        if (j >= visible || (causal && j > i)) values[(b * nq + i) * nk + j] = blocked;
      }
    }
  }
  return Tensor<T>(Shape{batch, nq, nk}, std::move(values));
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const MultiHeadWeights<T>& w, std::size_t scale_dim,
                               const Tensor<T>& mask, AttentionTrace<T>* trace) {
  check_head_layout(w);
  const std::size_t width = w.query_width();
  if (w.value_width() != width || w.out_width() != width) {
    throw ConfigError("multi-head attention expects equal query, value and output widths");
  }
  if (q.shape().cols() != width || v.shape().cols() != width) {
    throw DimensionError("multi-head attention of width " + std::to_string(width) +
                         " got query " + q.shape().str() + " and value " + v.shape().str());
  }
  check_keys(q, k, v);
  return attend_heads(q, k, v, w, scale_dim, mask, trace);
}

template <typename T>
Tensor<T> proposed_multi_head(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v_embed,
                              const MultiHeadWeights<T>& w, std::size_t scale_dim,
                              const Tensor<T>& mask, AttentionTrace<T>* trace) {
  check_head_layout(w);
  const std::size_t stream = w.query_width();
  if (stream % 2 != 0 || w.value_width() * 2 != stream || w.out_width() != stream) {
    throw ConfigError("proposed attention expects query/output width 2m and value width m");
  }
  if (q.shape().cols() != stream) {
    throw DimensionError("query " + q.shape().str() + " does not have stream width " +
                         std::to_string(stream));
  }
  if (v_embed.shape().cols() != w.value_width()) {
    throw DimensionError("value " + v_embed.shape().str() + " must have width m = " +
                         std::to_string(w.value_width()));
  }
  check_keys(q, k, v_embed);
  return attend_heads(q, k, v_embed, w, scale_dim, mask, trace);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const LayerNormParams<T>& params) {
  return add(mul(standardize_rows(x, static_cast<T>(kNormEps)), params.gain), params.bias);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FfnWeights<T>& w) {
  if (x.shape().cols() != w.w_in.shape().rows()) {
    throw DimensionError("feed-forward input " + x.shape().str() + " does not match weights " +
                         w.w_in.shape().str());
  }
  return project(relu(project(x, w.w_in, w.b_in)), w.w_out, w.b_out);
}

#define TLAB_INSTANTIATE_ATTENTION(T)                                                        \
  template struct MultiHeadWeights<T>;                                                       \
  template struct LayerNormParams<T>;                                                        \
  template struct FfnWeights<T>;                                                             \
  template Tensor<T> scaled_dot_attention(const Tensor<T>&, const Tensor<T>&,                \
                                          const Tensor<T>&, std::size_t, const Tensor<T>&);  \
  template Tensor<T> causal_mask<T>(std::size_t);                                            \
  template Tensor<T> attention_mask<T>(std::size_t, std::size_t, std::size_t,                \
                                       std::span<const std::size_t>, bool);                  \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&,                \
                                          const Tensor<T>&, const MultiHeadWeights<T>&,      \
                                          std::size_t, const Tensor<T>&, AttentionTrace<T>*); \
  template Tensor<T> proposed_multi_head(const Tensor<T>&, const Tensor<T>&,                 \
                                         const Tensor<T>&, const MultiHeadWeights<T>&,       \
                                         std::size_t, const Tensor<T>&, AttentionTrace<T>*); \
  template Tensor<T> layer_norm(const Tensor<T>&, const LayerNormParams<T>&);                \
  template Tensor<T> feed_forward(const Tensor<T>&, const FfnWeights<T>&);

TLAB_INSTANTIATE_ATTENTION(float)
TLAB_INSTANTIATE_ATTENTION(double)

#undef TLAB_INSTANTIATE_ATTENTION

}  // namespace tlab
