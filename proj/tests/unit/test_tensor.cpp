#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "gradient_cases.hpp"
#include "helpers.hpp"
#include "tlab/gradcheck.hpp"
#include "tlab/ops.hpp"

using namespace tlab;
using tlab::test::random_tensor;
using tlab::test::weighted_sum;

namespace {

using D = Tensor<double>;
constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

TEST_CASE("shape bookkeeping") {
  Shape s{2, 3, 4};
  CHECK(s.rank() == 3);
  CHECK(s.numel() == 24);
  CHECK(s.batch() == 2);
  CHECK(s.rows() == 3);
  CHECK(s.cols() == 4);
  CHECK(Shape{}.numel() == 1);
  CHECK_THROWS_AS((Shape{1, 2, 3, 4}), DimensionError);
  CHECK_THROWS_AS(D(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST_CASE("matmul") {
  const D a(Shape{2, 2}, {1, 2, 3, 4});
  const D b(Shape{2, 2}, {5, 6, 7, 8});
  const D eye(Shape{2, 2}, {1, 0, 0, 1});
  CHECK(tlab::test::bitwise_equal(matmul(a, eye), a));
  const D ab = matmul(a, b);
  CHECK(ab.values()[0] == 19);
  CHECK(ab.values()[1] == 22);
  CHECK(ab.values()[2] == 43);
  CHECK(ab.values()[3] == 50);
  CHECK_THROWS_AS(matmul(D(Shape{2, 3}), D(Shape{2, 3})), DimensionError);

  SUBCASE("error names both shapes") {
    try {
      matmul(D(Shape{2, 3}), D(Shape{2, 3}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
    }
  }

  SUBCASE("batched slices match per-slice products") {
    std::mt19937_64 rng(3);
    const D x = random_tensor<double>(Shape{3, 2, 4}, rng);
    const D w = random_tensor<double>(Shape{4, 5}, rng);
    const D y = matmul(x, w);
    REQUIRE(y.shape() == (Shape{3, 2, 5}));
    for (std::size_t bi = 0; bi < 3; ++bi) {
      const D slice(Shape{2, 4}, std::vector<double>(x.values().begin() + bi * 8,
                                                    x.values().begin() + (bi + 1) * 8));
      const D ys = matmul(slice, w);
      for (std::size_t i = 0; i < 10; ++i) CHECK(y.values()[bi * 10 + i] == doctest::Approx(ys.values()[i]));
    }
  }

  SUBCASE("associativity in single precision") {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 50; ++t) {
      const auto a4 = random_tensor<float>(Shape{4, 4}, rng);
      const auto b4 = random_tensor<float>(Shape{4, 4}, rng);
      const auto c4 = random_tensor<float>(Shape{4, 4}, rng);
      CHECK(tlab::test::max_abs_diff(matmul(matmul(a4, b4), c4), matmul(a4, matmul(b4, c4))) < 1e-6);
    }
  }
}

TEST_CASE("add and broadcast") {
  const D a(Shape{1, 2}, {1, 2});
  const D b(Shape{1, 2}, {3, 4});
  const D s = add(a, b);
  CHECK(s.values()[0] == 4);
  CHECK(s.values()[1] == 6);

  std::mt19937_64 rng(5);
  const D x = random_tensor<double>(Shape{3, 2}, rng);
  CHECK(tlab::test::bitwise_equal(add(x, D::filled(Shape{3, 2}, 0.0)), x));

  const D bias(Shape{1, 2}, {10, -1});
  const D shifted = add(x, bias);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(shifted.at(i, 0) - x.at(i, 0) == doctest::Approx(10));
    CHECK(shifted.at(i, 1) - x.at(i, 1) == doctest::Approx(-1));
  }
  CHECK_THROWS_AS(add(x, D(Shape{2, 2})), DimensionError);
  CHECK_THROWS_AS(add(x, D(Shape{1, 3})), DimensionError);
}

TEST_CASE("softmax rows") {
  const D s0 = softmax_rows(D(Shape{1, 2}, {0, 0}));
  CHECK(s0.values()[0] == doctest::Approx(0.5));
  const D s1 = softmax_rows(D(Shape{1, 2}, {1, 2}));
  CHECK(s1.values()[0] == doctest::Approx(0.26894).epsilon(1e-5));
  CHECK(s1.values()[1] == doctest::Approx(0.73106).epsilon(1e-5));
  const D s2 = softmax_rows(D(Shape{1, 2}, {0, -kInf}));
  CHECK(s2.values()[0] == 1.0);
  CHECK(s2.values()[1] == 0.0);
  CHECK_THROWS_AS(softmax_rows(D(Shape{1, 2}, {-kInf, -kInf})), NumericalError);

  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const D x = random_tensor<double>(Shape{4, 6}, rng, -20, 20);
    const D y = softmax_rows(x);
    std::vector<double> shifted(x.values().begin(), x.values().end());
    for (std::size_t j = 0; j < 6; ++j) shifted[6 + j] += 123.5;
    const D y2 = softmax_rows(D(x.shape(), shifted));
    for (std::size_t i = 0; i < 4; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(y.at(i, j) >= 0);
        row += y.at(i, j);
      }
      CHECK(std::abs(row - 1) < 1e-6);
    }
    CHECK(tlab::test::max_abs_diff(y, y2) < 1e-6);
  }
}

TEST_CASE("relu") {
  const D r = relu(D(Shape{1, 2}, {-1, 2}));
  CHECK(r.values()[0] == 0);
  CHECK(r.values()[1] == 2);
  const D x(Shape{1, 3}, {-1, 2, 0}, true);
  backward(sum(relu(x)));
  CHECK(x.grad()[0] == 0);
  CHECK(x.grad()[1] == 1);
  CHECK(x.grad()[2] == 0);
  const D neg = relu(D(Shape{2, 2}, {-1, -2, -3, -0.5}));
  for (double v : neg.values()) CHECK(v == 0);
}

TEST_CASE("concat and slice") {
  std::mt19937_64 rng(9);
  const D a = random_tensor<double>(Shape{3, 64}, rng);
  const D b = random_tensor<double>(Shape{3, 64}, rng);
  const D c = concat_cols(a, b);
  CHECK(c.shape() == (Shape{3, 128}));
  CHECK(tlab::test::bitwise_equal(slice_cols(c, 0, 64), a));
  CHECK(tlab::test::bitwise_equal(slice_cols(c, 64, 64), b));
  CHECK(tlab::test::bitwise_equal(concat_cols(a, D(Shape{3, 0})), a));
  CHECK_THROWS_AS(concat_cols(a, D(Shape{2, 4})), DimensionError);
  CHECK_THROWS_AS(slice_cols(a, 60, 5), DimensionError);
}

TEST_CASE("gather rows") {
  const D table(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  const std::vector<TokenId> ids{2, 0};
  const D g = gather_rows(table, std::span<const TokenId>(ids));
  CHECK(std::vector<double>(g.values().begin(), g.values().end()) == std::vector<double>{5, 6, 1, 2});
  const std::vector<TokenId> twice{0, 0};
  const D g2 = gather_rows(table, std::span<const TokenId>(twice));
  CHECK(g2.at(0, 0) == g2.at(1, 0));
  CHECK(g2.at(0, 1) == g2.at(1, 1));
  const std::vector<TokenId> bad{3};
  CHECK_THROWS_AS(gather_rows(table, std::span<const TokenId>(bad)), IndexError);
  try {
    gather_rows(table, std::span<const TokenId>(bad));
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }

  SUBCASE("backward scatters occurrence counts") {
    std::mt19937_64 rng(1);
    const D t = random_tensor<double>(Shape{6, 3}, rng, -1, 1, true);
    const std::vector<TokenId> many{1, 4, 1, 1, 0, 4, 5};
    backward(sum(gather_rows(t, std::span<const TokenId>(many))));
    std::map<TokenId, int> counts;
    for (TokenId id : many) ++counts[id];
    for (TokenId r = 0; r < 6; ++r) {
      double row = 0;
      for (std::size_t j = 0; j < 3; ++j) row += t.grad()[static_cast<std::size_t>(r) * 3 + j];
      CHECK(row == doctest::Approx(3.0 * counts[r]));
    }
  }
}

TEST_CASE("backward semantics") {
  const D x(Shape{1, 3}, {1, 2, 3}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 2);

  const D y(Shape{1, 2}, {1, 2}, true);
  backward(sum(mul(y, y)));
  CHECK(y.grad()[0] == doctest::Approx(2));
  CHECK(y.grad()[1] == doctest::Approx(4));

  CHECK_THROWS_AS(backward(mul(y, y)), ContractError);
  CHECK_THROWS_AS(mul(y, y).mutable_values(), ContractError);

  SUBCASE("no graph under NoGradGuard") {
    NoGradGuard g;
    const D z = mul(y, y);
    CHECK(z.is_leaf());
    CHECK_FALSE(z.requires_grad());
  }
}

TEST_CASE("computation record is topologically ordered") {
  std::mt19937_64 rng(2);
  const D a = random_tensor<double>(Shape{3, 3}, rng, -1, 1, true);
  const D b = random_tensor<double>(Shape{3, 3}, rng, -1, 1, true);
  const D h = relu(matmul(a, b));
  const D loss = sum(add(softmax_rows(h), mul(h, a)));
  ComputationRecord<double> record(loss);
  std::set<const detail::Node<double>*> seen;
  std::size_t visits = 0;
  for (auto* node : record.nodes()) {
    for (const auto& in : node->inputs) CHECK(seen.count(in.get()) == 1);
    CHECK(seen.insert(node).second);
    ++visits;
  }
  CHECK(visits == record.size());
  CHECK(record.nodes().back() == &loss.node());
}

TEST_CASE("check_finite") {
  CHECK_NOTHROW(check_finite(D(Shape{1, 2}, {1, 2}), "x"));
  CHECK_THROWS_AS(check_finite(D(Shape{1, 2}, {1, std::nan("")}), "x"), NumericalError);
}

TEST_CASE("finite_diff_check reference points") {
  std::mt19937_64 rng(4);
  const D x = random_tensor<double>(Shape{3, 4}, rng);
  CHECK(finite_diff_check<double>([](const D& v) { return sum(v); }, x, 1e-5) < 1e-10);
  const D far = random_tensor<double>(Shape{3, 4}, rng, 0.5, 2.0);
  CHECK(finite_diff_check<double>([](const D& v) { return sum(relu(v)); }, far, 1e-5) < 1e-8);
}

TEST_CASE("gradients of every op match finite differences") {
  std::uint64_t seed = 1;
  for (const auto& c : tlab::test::primitive_op_cases()) {
    CAPTURE(c.name);
    CHECK(tlab::test::worst_gradient_error(c, seed++) < 1e-4);
  }
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(1);
  const D x = D::filled(Shape{100, 100}, 1.0);
  const D y = dropout(x, 0.25, rng);
  std::size_t zeros = 0;
  for (double v : y.values()) {
    if (v == 0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1 / 0.75));
    }
  }
  CHECK(zeros > 2300);
  CHECK(zeros < 2700);
  CHECK(tlab::test::bitwise_equal(dropout(x, 0.0, rng), x));
  CHECK_THROWS_AS(dropout(x, 1.0, rng), ContractError);
}
