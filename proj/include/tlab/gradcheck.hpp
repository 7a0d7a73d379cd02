#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "tlab/tensor.hpp"

namespace tlab {

// Compares the reverse-mode gradient of a scalar function at x against
// central differences. Returns max |analytic - numeric| / max(1, |analytic|)
// over all coordinates of x.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                         const Tensor<T>& x, double eps);

// Same comparison for an argument-free loss over existing leaf parameters,
// probing at most `coords_per_param` seeded coordinates of each (0 = all).
// Parameter values are restored afterwards; their grads are left zeroed.
template <typename T>
double finite_diff_check_params(const std::function<Tensor<T>()>& loss,
                                std::span<Tensor<T>> params, double eps,
                                std::size_t coords_per_param = 0, std::uint64_t seed = 0);

}  // namespace tlab
