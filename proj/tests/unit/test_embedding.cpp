#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "tlab/embedding.hpp"
#include "tlab/gradcheck.hpp"

using namespace tlab;
using tlab::test::random_tensor;

namespace {

using D = Tensor<double>;

// Column mean and population variance of a [n x m] tensor.
void column_moments(const D& y, std::size_t col, double& mean, double& var) {
  const std::size_t n = y.shape().rows();
  mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += y.at(i, col);
  mean /= static_cast<double>(n);
  var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (y.at(i, col) - mean) * (y.at(i, col) - mean);
  var /= static_cast<double>(n);
}

}  // namespace

TEST_CASE("token embedding") {
  std::mt19937_64 rng(1);
  const D table = glorot_uniform<double>(5, 3, rng);
  CHECK(table.requires_grad());
  const std::vector<TokenId> same{2, 2};
  const D e = token_embed(table, std::span<const TokenId>(same));
  for (std::size_t j = 0; j < 3; ++j) CHECK(e.at(0, j) == e.at(1, j));
  CHECK(token_embed(table, std::span<const TokenId>{}).shape() == (Shape{0, 3}));
  const std::vector<TokenId> bad{5};
  CHECK_THROWS_AS(token_embed(table, std::span<const TokenId>(bad)), IndexError);

  SUBCASE("equals the one-hot product") {
    const std::vector<TokenId> ids{4, 0, 2, 2, 1};
    std::vector<double> onehot(ids.size() * 5, 0.0);
    for (std::size_t i = 0; i < ids.size(); ++i) onehot[i * 5 + static_cast<std::size_t>(ids[i])] = 1;
    const D oracle = matmul(D(Shape{ids.size(), 5}, onehot), table);
    CHECK(tlab::test::max_abs_diff(token_embed(table, std::span<const TokenId>(ids)), oracle) < 1e-15);
  }
}

TEST_CASE("glorot range") {
  std::mt19937_64 rng(2);
  const auto w = glorot_uniform<double>(30, 50, rng);
  const double limit = std::sqrt(6.0 / 80.0);
  for (double v : w.values()) CHECK(std::abs(v) <= limit);
}

TEST_CASE("positional encoding") {
  const D p = positional_encoding<double>(3, 4);
  CHECK(p.at(0, 0) == doctest::Approx(std::sin(0.01)).epsilon(1e-12));
  CHECK(p.at(0, 0) == doctest::Approx(0.0099998).epsilon(1e-5));
  CHECK(p.at(0, 2) == doctest::Approx(std::cos(1e-6)).epsilon(1e-12));
  CHECK(p.at(0, 2) == doctest::Approx(1.0).epsilon(1e-7));
  CHECK_THROWS_AS(positional_encoding<double>(3, 5), ConfigError);

  const D big = positional_encoding<double>(128, 64);
  for (double v : big.values()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  for (std::size_t n : {1u, 7u, 50u}) {
    const D part = positional_encoding<double>(n, 64);
    CHECK(std::equal(part.values().begin(), part.values().end(), big.values().begin()));
  }
  const PositionalTable<double> table(16, 8);
  CHECK(tlab::test::bitwise_equal(table.rows(5), positional_encoding<double>(5, 8)));
  const D batched = table.batched(3, 5);
  CHECK(batched.shape() == (Shape{3, 5, 8}));
  CHECK(batched.at(2, 4, 7) == table.rows(5).at(4, 7));
  CHECK_THROWS_AS(table.rows(17), InputError);
}

TEST_CASE("token normalization") {
  const D col(Shape{3, 1}, {1, 2, 3});
  const D y = token_normalize(col);
  CHECK(y.at(0, 0) == doctest::Approx(-1.22474).epsilon(1e-5));
  CHECK(y.at(1, 0) == doctest::Approx(0.0));
  CHECK(y.at(2, 0) == doctest::Approx(1.22474).epsilon(1e-5));

  const D constant = token_normalize(D(Shape{3, 1}, {5, 5, 5}));
  for (double v : constant.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(token_normalize(D(Shape{0, 3})), InputError);

  const D normalized(Shape{3, 1}, {-1.224744871391589, 0.0, 1.224744871391589});
  CHECK(tlab::test::max_abs_diff(token_normalize(normalized), normalized) < 1e-6);

  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng() % 15;
    const std::size_t m = 1 + rng() % 8;
    const D x = tlab::test::spread_columns(n, m, rng);
    const D z = token_normalize(x);
    for (std::size_t j = 0; j < m; ++j) {
      double mean = 0, var = 0;
      column_moments(z, j, mean, var);
      CHECK(std::abs(mean) < 1e-6);
      CHECK(std::abs(var - 1) < 1e-5);
    }
  }

  SUBCASE("gradient") {
    std::mt19937_64 g(8);
    for (int t = 0; t < 10; ++t) {
      const D x = random_tensor<double>(Shape{5, 3}, g);
      const D w = random_tensor<double>(Shape{5, 3}, g);
      CHECK(finite_diff_check<double>([&](const D& v) { return sum(mul(token_normalize(v), w)); },
                                      x, 1e-5) < 1e-4);
    }
  }

  SUBCASE("per-sequence statistics ignore padding rows") {
    const D x = random_tensor<double>(Shape{2, 6, 3}, rng);
    const std::vector<std::size_t> lengths{6, 4};
    const D z = token_normalize(x, std::span<const std::size_t>(lengths));
    const D alone = token_normalize(D(Shape{4, 3}, std::vector<double>(x.values().begin() + 18,
                                                                       x.values().begin() + 30)));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(z.at(1, i, j) == doctest::Approx(alone.at(i, j)));
    }
    for (std::size_t j = 0; j < 3; ++j) CHECK(z.at(1, 5, j) == 0.0);
  }
}

TEST_CASE("prefix token normalization is causal") {
  std::mt19937_64 rng(4);
  const D x = random_tensor<double>(Shape{6, 3}, rng);
  const D z = token_normalize_prefix(x);
  // Row i equals the last row of a full normalization of rows 0..i.
  for (std::size_t i = 1; i < 6; ++i) {
    const D head(Shape{i + 1, 3}, std::vector<double>(x.values().begin(),
                                                      x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * 3)));
    const D full = token_normalize(head);
    for (std::size_t j = 0; j < 3; ++j) CHECK(z.at(i, j) == doctest::Approx(full.at(i, j)));
  }
  for (std::size_t j = 0; j < 3; ++j) CHECK(z.at(0, j) == 0.0);
}

TEST_CASE("concat embedding") {
  std::mt19937_64 rng(5);
  const D x = token_normalize(random_tensor<double>(Shape{7, 64}, rng));
  const D p = positional_encoding<double>(7, 64);
  const D c = concat_embed(x, p);
  CHECK(c.shape() == (Shape{7, 128}));
  CHECK(tlab::test::bitwise_equal(slice_cols(c, 0, 64), x));
  CHECK(tlab::test::bitwise_equal(slice_cols(c, 64, 64), p));
  CHECK_THROWS_AS(concat_embed(x, positional_encoding<double>(6, 64)), DimensionError);

  const D leaf = random_tensor<double>(Shape{7, 64}, rng, -1, 1, true);
  backward(sum(concat_embed(leaf, p)));
  for (double g : leaf.grad()) CHECK(g == 1.0);
  CHECK_FALSE(p.requires_grad());
}

TEST_CASE("baseline input scaling") {
  const D p = positional_encoding<double>(3, 64);
  CHECK(tlab::test::bitwise_equal(baseline_embed_input(D::filled(Shape{3, 64}, 0.0), p, 64), p));
  const D ones = D::filled(Shape{3, 64}, 1.0);
  const D zero = D::filled(Shape{3, 64}, 0.0);
  const D divided = baseline_embed_input(ones, zero, 64);
  for (double v : divided.values()) CHECK(v == 0.125);
  const D multiplied = baseline_embed_input(ones, zero, 64, EmbedScaleMode::multiply);
  for (double v : multiplied.values()) CHECK(v == 8.0);
  CHECK_THROWS_AS(baseline_embed_input(ones, positional_encoding<double>(2, 64), 64), DimensionError);
}
