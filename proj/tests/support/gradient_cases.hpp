#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "tlab/gradcheck.hpp"
#include "tlab/train.hpp"

namespace tlab::test {

struct OpCase {
  std::string name;
  Shape input;
  std::function<Tensor<double>(const Tensor<double>&)> op;
  double lo = -1.0;
  double hi = 1.0;
};

// Worst finite-difference error of x -> sum(op(x) * w) over `points` random x.
inline double worst_gradient_error(const OpCase& c, std::uint64_t seed, int points = 10) {
  std::mt19937_64 rng(seed);
  double worst = 0;
  for (int p = 0; p < points; ++p) {
    const Tensor<double> x = random_tensor<double>(c.input, rng, c.lo, c.hi);
    Tensor<double> probe;
    {
      NoGradGuard g;
      probe = c.op(x);
    }
    const Tensor<double> w = random_tensor<double>(probe.shape(), rng);
    worst = std::max(worst, finite_diff_check<double>(
                                [&](const Tensor<double>& v) { return weighted_sum(c.op(v), w); },
                                x, 1e-5));
  }
  return worst;
}

// Every differentiable primitive, in each operand position and broadcast form.
inline std::vector<OpCase> primitive_op_cases() {
  using D = Tensor<double>;
  std::mt19937_64 rng(99);
  const D w34 = random_tensor<double>(Shape{3, 4}, rng);
  const D w54 = random_tensor<double>(Shape{5, 4}, rng);
  const D row = random_tensor<double>(Shape{1, 4}, rng);
  const D slice = random_tensor<double>(Shape{3, 4}, rng);
  const D other = random_tensor<double>(Shape{3, 4}, rng);
  const D other3 = random_tensor<double>(Shape{2, 3, 4}, rng);
  const auto ids = std::make_shared<std::vector<TokenId>>(std::vector<TokenId>{3, 0, 3, 2, 1, 3});
  const auto lengths = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{5, 3});

  return {
      {"matmul lhs", Shape{2, 3}, [=](const D& x) { return matmul(x, w34); }},
      {"matmul rhs", Shape{4, 5}, [=](const D& x) { return matmul(w34, x); }},
      {"matmul batched lhs", Shape{2, 3, 3}, [=](const D& x) { return matmul(x, w34); }},
      {"matmul batched rhs", Shape{2, 4, 5}, [=](const D& x) { return matmul(other3, x); }},
      {"matmul_transposed lhs", Shape{2, 4}, [=](const D& x) { return matmul_transposed(x, w54); }},
      {"matmul_transposed rhs", Shape{5, 4}, [=](const D& x) { return matmul_transposed(w34, x); }},
      {"matmul_transposed batched", Shape{2, 3, 4}, [=](const D& x) { return matmul_transposed(x, other3); }},
      {"add", Shape{3, 4}, [=](const D& x) { return add(x, other); }},
      {"add broadcast row", Shape{1, 4}, [=](const D& x) { return add(other, x); }},
      {"add broadcast batch", Shape{3, 4}, [=](const D& x) { return add(other3, x); }},
      {"mul self", Shape{3, 4}, [](const D& x) { return mul(x, x); }},
      {"mul broadcast", Shape{1, 4}, [=](const D& x) { return mul(other3, x); }},
      {"mul batched", Shape{2, 3, 4}, [=](const D& x) { return mul(x, row); }},
      {"mul", Shape{3, 4}, [=](const D& x) { return mul(x, slice); }},
      {"scale", Shape{3, 4}, [](const D& x) { return scale(x, -2.5); }},
      {"sum", Shape{2, 3, 4}, [](const D& x) { return mul(sum(x), sum(x)); }},
      {"relu", Shape{3, 4}, [](const D& x) { return relu(x); }},
      {"softmax_rows", Shape{3, 5}, [](const D& x) { return softmax_rows(x); }, -3, 3},
      {"softmax_rows batched", Shape{2, 3, 5}, [](const D& x) { return softmax_rows(x); }, -3, 3},
      {"concat_cols left", Shape{3, 2}, [=](const D& x) { return concat_cols(x, other); }},
      {"concat_cols right", Shape{3, 2}, [=](const D& x) { return concat_cols(other, x); }},
      {"concat_cols batched", Shape{2, 3, 4}, [=](const D& x) { return concat_cols(x, other3); }},
      {"slice_cols", Shape{3, 6}, [](const D& x) { return slice_cols(x, 2, 3); }},
      {"slice_cols batched", Shape{2, 3, 6}, [](const D& x) { return slice_cols(x, 1, 4); }},
      {"gather_rows", Shape{4, 3}, [=](const D& x) { return gather_rows(x, std::span<const TokenId>(*ids)); }},
      {"gather_rows batched", Shape{4, 3},
       [=](const D& x) { return gather_rows(x, std::span<const TokenId>(*ids), 2); }},
      {"reshape", Shape{3, 4}, [](const D& x) { return reshape(x, Shape{2, 6}); }},
      {"standardize_rows", Shape{4, 5}, [](const D& x) { return standardize_rows(x, 1e-6); }},
      {"standardize_rows batched", Shape{2, 3, 5}, [](const D& x) { return standardize_rows(x, 1e-6); }},
      {"standardize_cols", Shape{5, 3}, [](const D& x) { return standardize_cols(x, 1e-6); }},
      {"standardize_cols lengths", Shape{2, 5, 3},
       [=](const D& x) { return standardize_cols(x, 1e-6, std::span<const std::size_t>(*lengths)); }},
      {"standardize_cols_prefix", Shape{5, 3}, [](const D& x) { return standardize_cols_prefix(x, 1e-6); }},
      {"standardize_cols_prefix lengths", Shape{2, 5, 3},
       [=](const D& x) { return standardize_cols_prefix(x, 1e-6, std::span<const std::size_t>(*lengths)); }},
      {"dropout", Shape{4, 6},
       [](const D& x) {
         std::mt19937_64 drop(42);  // same mask on every evaluation
         return dropout(x, 0.3, drop);
       }},
      {"masked_cross_entropy", Shape{2, 3, 7},
       [](const D& x) {
         const std::vector<TokenId> labels{4, 6, Vocab::kPad, 5, Vocab::kPad, 1};
         return masked_cross_entropy(x, std::span<const TokenId>(labels));
       },
       -3, 3},
  };
}

// Micro model (m=4, N=1, p=1, vocab 11, n=3) with randomized biases and norm
// parameters; returns the finite-difference error of its masked loss.
inline double micro_model_gradient_error(Variant v) {
  ModelConfig c = ModelConfig::defaults_for(v);
  c.blocks = 1;
  c.embed_dim = 4;
  c.ffn_hidden = 6;
  c.heads = 1;
  c.head_dim = 4;
  c.dropout = 0;
  c.max_len = 8;
  c.src_vocab = 11;
  c.tgt_vocab = 11;
  c.seed = 3;
  const Seq2SeqModel<double> model(c);
  std::mt19937_64 rng(9);
  for (auto& p : model.parameters()) {
    if (p.name.find(".b") != std::string::npos || p.name.find("gain") != std::string::npos ||
        p.name == "out_bias") {
      for (auto& x : p.tensor.mutable_values()) x += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    }
  }
  const std::vector<TokenId> src{4, 9, 6};
  const std::vector<TokenId> tgt_in{Vocab::kStart, 7, 5};
  const std::vector<TokenId> labels{7, 5, Vocab::kEnd};
  std::vector<Tensor<double>> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  auto loss = [&] {
    return masked_cross_entropy(
        model_forward(model, std::span<const TokenId>(src), std::span<const TokenId>(tgt_in)),
        std::span<const TokenId>(labels));
  };
  return finite_diff_check_params<double>(loss, params, 1e-5);
}

}  // namespace tlab::test
