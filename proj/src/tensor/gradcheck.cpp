#include "tlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace tlab {

namespace {

double relative_gap(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                         const Tensor<T>& x, double eps) {
  Tensor<T> probe(x.shape(), std::vector<T>(x.values().begin(), x.values().end()), true);
  backward(f(probe));
  const std::vector<T> analytic(probe.grad().begin(), probe.grad().end());

  NoGradGuard no_grad;
  auto values = probe.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + static_cast<T>(eps);
    const double up = f(probe).item();
    values[i] = saved - static_cast<T>(eps);
    const double down = f(probe).item();
    values[i] = saved;
    worst = std::max(worst, relative_gap(analytic[i], (up - down) / (2.0 * eps)));
  }
  return worst;
}

template <typename T>
double finite_diff_check_params(const std::function<Tensor<T>()>& loss,
                                std::span<Tensor<T>> params, double eps,
                                std::size_t coords_per_param, std::uint64_t seed) {
  for (auto& p : params) p.zero_grad();
  backward(loss());
  std::mt19937_64 rng(seed);
  NoGradGuard no_grad;
  double worst = 0.0;
  for (auto& p : params) {
    const std::vector<T> analytic(p.grad().begin(), p.grad().end());
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords_per_param > 0 && coords.size() > coords_per_param) {
      for (std::size_t i = 0; i < coords_per_param; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(coords_per_param);
    }
    auto values = p.mutable_values();
    for (std::size_t i : coords) {
      const T saved = values[i];
      values[i] = saved + static_cast<T>(eps);
      const double up = loss().item();
      values[i] = saved - static_cast<T>(eps);
      const double down = loss().item();
      values[i] = saved;
      worst = std::max(worst, relative_gap(analytic[i], (up - down) / (2.0 * eps)));
    }
    p.zero_grad();
  }
  return worst;
}

template double finite_diff_check(const std::function<Tensor<float>(const Tensor<float>&)>&,
                                  const Tensor<float>&, double);
template double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>&,
                                  const Tensor<double>&, double);
template double finite_diff_check_params(const std::function<Tensor<float>()>&,
                                         std::span<Tensor<float>>, double, std::size_t,
                                         std::uint64_t);
template double finite_diff_check_params(const std::function<Tensor<double>()>&,
                                         std::span<Tensor<double>>, double, std::size_t,
                                         std::uint64_t);

}  // namespace tlab
