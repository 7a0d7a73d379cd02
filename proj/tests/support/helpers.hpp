#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tlab/ops.hpp"

namespace tlab::test {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(shape.numel());
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

// sum(f * w) for a fixed random w, so every output entry gets its own weight.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& f, const Tensor<T>& w) {
  return sum(mul(f, w));
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return worst;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  return max_abs_diff<T>(a.values(), b.values());
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tlab-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Random [n x m] matrix, entries in [-10, 10], each column redrawn until its
// population variance is at least 1 so the normalization guard stays
// negligible next to the variance.
inline Tensor<double> spread_columns(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-10.0, 10.0);
  std::vector<double> v(n * m);
  for (std::size_t j = 0; j < m; ++j) {
    double var = 0;
    do {
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += (v[i * m + j] = dist(rng));
      mean /= static_cast<double>(n);
      var = 0;
      for (std::size_t i = 0; i < n; ++i) var += (v[i * m + j] - mean) * (v[i * m + j] - mean);
      var /= static_cast<double>(n);
    } while (var < 1.0);
  }
  return Tensor<double>(Shape{n, m}, std::move(v));
}

}  // namespace tlab::test
