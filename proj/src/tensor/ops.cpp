#include "tlab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tlab {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatrixMap<T> cmap(const std::vector<T>& v, std::size_t offset, std::size_t rows,
                       std::size_t cols) {
  return ConstMatrixMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(cols));
}

template <typename T>
MatrixMap<T> mmap(std::vector<T>& v, std::size_t offset, std::size_t rows, std::size_t cols) {
  return MatrixMap<T>(v.data() + offset, static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
}

std::string shapes_msg(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str();
}

struct MatmulDims {
  std::size_t batch = 1;
  std::size_t n = 0;  // rows of a
  std::size_t k = 0;  // shared extent
  std::size_t p = 0;  // output columns
  bool shared_b = true;
  Shape out;
};

// transposed_b: b is stored [p x k] instead of [k x p].
MatmulDims matmul_dims(const char* op, const Shape& a, const Shape& b, bool transposed_b) {
  if (a.rank() < 2 || b.rank() < 2) throw DimensionError(shapes_msg(op, a, b));
  MatmulDims d;
  d.n = a.rows();
  d.k = a.cols();
  const std::size_t b_inner = transposed_b ? b.cols() : b.rows();
  d.p = transposed_b ? b.rows() : b.cols();
  if (b_inner != d.k) throw DimensionError(shapes_msg(op, a, b));
  if (b.rank() == 3) {
    if (a.rank() != 3 || a.batch() != b.batch()) throw DimensionError(shapes_msg(op, a, b));
    d.shared_b = false;
  }
  d.batch = a.batch();
  d.out = a.rank() == 3 ? Shape{d.batch, d.n, d.p} : Shape{d.n, d.p};
  return d;
}

// b's flat data repeats over a's: same shape, a matching row vector, or one
// batch slice of a rank-3 tensor.
void check_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return;
  const bool row_vector = (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1)) &&
                          b.cols() == a.cols() && a.rank() >= 1;
  const bool batch_slice = a.rank() == 3 && b.rank() == 2 && b.rows() == a.rows() &&
                           b.cols() == a.cols();
  if (!row_vector && !batch_slice) throw DimensionError(shapes_msg(op, a, b));
}

template <typename T>
std::vector<T>* grad_if_needed(detail::Node<T>& self, std::size_t input) {
  auto& in = *self.inputs[input];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const MatmulDims d = matmul_dims("matmul", a.shape(), b.shape(), false);
  std::vector<T> out(d.out.numel());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  if (d.shared_b) {
    mmap(out, 0, d.batch * d.n, d.p).noalias() =
        cmap(av, 0, d.batch * d.n, d.k) * cmap(bv, 0, d.k, d.p);
  } else {
    for (std::size_t s = 0; s < d.batch; ++s) {
      mmap(out, s * d.n * d.p, d.n, d.p).noalias() =
          cmap(av, s * d.n * d.k, d.n, d.k) * cmap(bv, s * d.k * d.p, d.k, d.p);
    }
  }
  auto bw = [d](detail::Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto* ga = grad_if_needed(self, 0);
    auto* gb = grad_if_needed(self, 1);
    if (d.shared_b) {
      const std::size_t rows = d.batch * d.n;
      if (ga) mmap(*ga, 0, rows, d.k).noalias() += cmap(g, 0, rows, d.p) * cmap(bv, 0, d.k, d.p).transpose();
      if (gb) mmap(*gb, 0, d.k, d.p).noalias() += cmap(av, 0, rows, d.k).transpose() * cmap(g, 0, rows, d.p);
      return;
    }
    for (std::size_t s = 0; s < d.batch; ++s) {
      const std::size_t oa = s * d.n * d.k, ob = s * d.k * d.p, og = s * d.n * d.p;
      if (ga) mmap(*ga, oa, d.n, d.k).noalias() += cmap(g, og, d.n, d.p) * cmap(bv, ob, d.k, d.p).transpose();
      if (gb) mmap(*gb, ob, d.k, d.p).noalias() += cmap(av, oa, d.n, d.k).transpose() * cmap(g, og, d.n, d.p);
    }
  };
  return Tensor<T>::make_result(d.out, std::move(out), {a, b}, bw, "matmul");
}

template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  const MatmulDims d = matmul_dims("matmul_transposed", a.shape(), b.shape(), true);
  std::vector<T> out(d.out.numel());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  if (d.shared_b) {
    mmap(out, 0, d.batch * d.n, d.p).noalias() =
        cmap(av, 0, d.batch * d.n, d.k) * cmap(bv, 0, d.p, d.k).transpose();
  } else {
    for (std::size_t s = 0; s < d.batch; ++s) {
      mmap(out, s * d.n * d.p, d.n, d.p).noalias() =
          cmap(av, s * d.n * d.k, d.n, d.k) * cmap(bv, s * d.p * d.k, d.p, d.k).transpose();
    }
  }
  auto bw = [d](detail::Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    auto* ga = grad_if_needed(self, 0);
    auto* gb = grad_if_needed(self, 1);
    if (d.shared_b) {
      const std::size_t rows = d.batch * d.n;
      if (ga) mmap(*ga, 0, rows, d.k).noalias() += cmap(g, 0, rows, d.p) * cmap(bv, 0, d.p, d.k);
      if (gb) mmap(*gb, 0, d.p, d.k).noalias() += cmap(g, 0, rows, d.p).transpose() * cmap(av, 0, rows, d.k);
      return;
    }
    for (std::size_t s = 0; s < d.batch; ++s) {
      const std::size_t oa = s * d.n * d.k, ob = s * d.p * d.k, og = s * d.n * d.p;
      if (ga) mmap(*ga, oa, d.n, d.k).noalias() += cmap(g, og, d.n, d.p) * cmap(bv, ob, d.p, d.k);
      if (gb) mmap(*gb, ob, d.p, d.k).noalias() += cmap(g, og, d.n, d.p).transpose() * cmap(av, oa, d.n, d.k);
    }
  };
  return Tensor<T>::make_result(d.out, std::move(out), {a, b}, bw, "matmul_transposed");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("add", a.shape(), b.shape());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  const std::size_t nb = bv.size();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < av.size(); o += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[o + j] = av[o + j] + bv[j];
  }
  auto bw = [nb](detail::Node<T>& self) {
    const auto& g = self.grad;
    if (auto* ga = grad_if_needed(self, 0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = grad_if_needed(self, 1)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*gb)[j] += g[o + j];
      }
    }
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, bw, "add");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast("mul", a.shape(), b.shape());
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  const std::size_t nb = bv.size();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < av.size(); o += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[o + j] = av[o + j] * bv[j];
  }
  auto bw = [nb](detail::Node<T>& self) {
    const auto& g = self.grad;
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto* ga = grad_if_needed(self, 0)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*ga)[o + j] += g[o + j] * bv[j];
      }
    }
    if (auto* gb = grad_if_needed(self, 1)) {
      for (std::size_t o = 0; o < g.size(); o += nb) {
        for (std::size_t j = 0; j < nb; ++j) (*gb)[j] += g[o + j] * av[o + j];
      }
    }
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, bw, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  auto bw = [factor](detail::Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * self.grad[i];
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, bw, "scale");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto& av = a.node().value;
  const T total = std::accumulate(av.begin(), av.end(), T(0));
  auto bw = [](detail::Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (auto& v : ga) v += self.grad[0];
  };
  return Tensor<T>::make_result(Shape{}, {total}, {a}, bw, "sum");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  auto bw = [](detail::Node<T>& self) {
    const auto& in = self.inputs[0]->value;
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (in[i] > T(0)) ga[i] += self.grad[i];
    }
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, bw, "relu");
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  const std::size_t cols = a.shape().cols();
  if (cols == 0) throw DimensionError("softmax_rows needs at least one column");
  const auto& av = a.node().value;
  const std::size_t rows = av.size() / cols;
  std::vector<T> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    const T top = *std::max_element(x, x + cols);
    if (top == -std::numeric_limits<T>::infinity()) {
      throw NumericalError("softmax row " + std::to_string(r) +
                           " is entirely -inf; no valid distribution");
    }
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - top);
      total += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  auto bw = [cols, rows](detail::Node<T>& self) {
    const auto& y = self.value;
    const auto& g = self.grad;
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[o + c] * g[o + c];
      for (std::size_t c = 0; c < cols; ++c) ga[o + c] += y[o + c] * (g[o + c] - dot);
    }
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, bw, "softmax_rows");
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ContractError("concat_cols needs at least one input");
  const Shape& first = parts[0].shape();
  if (first.rank() < 2) throw DimensionError("concat_cols needs matrices, got " + first.str());
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != first.rank() || s.rows() != first.rows() || s.batch() != first.batch()) {
      throw DimensionError(shapes_msg("concat_cols", first, s));
    }
    widths.push_back(s.cols());
    total += s.cols();
  }
  const std::size_t rows = first.batch() * first.rows();
  const Shape out_shape = first.rank() == 3 ? Shape{first.batch(), first.rows(), total}
                                            : Shape{first.rows(), total};
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = parts[i].node().value;
    const std::size_t w = widths[i];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(pv.data() + r * w, w, out.data() + r * total + offset);
    }
    offset += w;
  }
  auto bw = [widths, rows, total](detail::Node<T>& self) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::size_t w = widths[i];
      if (auto* gi = grad_if_needed(self, i)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < w; ++c) (*gi)[r * w + c] += self.grad[r * total + offset + c];
        }
      }
      offset += w;
    }
  };
  return Tensor<T>::make_result(out_shape, std::move(out),
                                std::vector<Tensor<T>>(parts.begin(), parts.end()), bw,
                                "concat_cols");
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  const std::array<Tensor<T>, 2> parts{a, b};
  return concat_cols<T>(std::span<const Tensor<T>>(parts));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t width) {
  const Shape& s = a.shape();
  if (s.rank() < 2 || start + width > s.cols()) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") outside " + s.str());
  }
  const std::size_t cols = s.cols();
  const std::size_t rows = s.batch() * s.rows();
  const Shape out_shape = s.rank() == 3 ? Shape{s.batch(), s.rows(), width} : Shape{s.rows(), width};
  std::vector<T> out(rows * width);
  const auto& av = a.node().value;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data() + r * cols + start, width, out.data() + r * width);
  }
  auto bw = [rows, cols, start, width](detail::Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < width; ++c) ga[r * cols + start + c] += self.grad[r * width + c];
    }
  };
  return Tensor<T>::make_result(out_shape, std::move(out), {a}, bw, "slice_cols");
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const TokenId> ids, std::size_t batch) {
  const Shape& ts = table.shape();
  if (ts.rank() != 2) throw DimensionError("gather_rows needs a 2-D table, got " + ts.str());
  const std::size_t vocab = ts.rows();
  const std::size_t width = ts.cols();
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  Shape out_shape{ids.size(), width};
  if (batch > 0) {
    if (ids.size() % batch != 0) {
      throw DimensionError("gather_rows: " + std::to_string(ids.size()) +
                           " ids do not split into " + std::to_string(batch) + " rows");
    }
    out_shape = Shape{batch, ids.size() / batch, width};
  }
  std::vector<T> out(ids.size() * width);
  const auto& tv = table.node().value;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * width, width,
                out.data() + i * width);
  }
  std::vector<TokenId> kept(ids.begin(), ids.end());
  auto bw = [kept = std::move(kept), width](detail::Node<T>& self) {
    auto& gt = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < kept.size(); ++i) {
      T* dst = gt.data() + static_cast<std::size_t>(kept[i]) * width;
      const T* src = self.grad.data() + i * width;
      for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
    }
  };
  return Tensor<T>::make_result(out_shape, std::move(out), {table}, bw, "gather_rows");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape.numel() != a.numel()) {
    throw DimensionError(shapes_msg("reshape", a.shape(), shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bw = [](detail::Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  };
  return Tensor<T>::make_result(shape, std::move(out), {a}, bw, "reshape");
}

template <typename T>
Tensor<T> standardize_rows(const Tensor<T>& a, T eps) {
  const std::size_t cols = a.shape().cols();
  const auto& av = a.node().value;
  const std::size_t rows = cols == 0 ? 0 : av.size() / cols;
  std::vector<T> out(av.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += x[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= static_cast<T>(cols);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) y[c] = (x[c] - mean) * inv;
  }
  auto bw = [inv_std = std::move(inv_std), rows, cols](detail::Node<T>& self) {
    const auto& y = self.value;
    const auto& g = self.grad;
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * cols;
      T mean_g = 0, mean_gy = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        mean_g += g[o + c];
        mean_gy += g[o + c] * y[o + c];
      }
      mean_g /= static_cast<T>(cols);
      mean_gy /= static_cast<T>(cols);
      for (std::size_t c = 0; c < cols; ++c) {
        ga[o + c] += inv_std[r] * (g[o + c] - mean_g - y[o + c] * mean_gy);
      }
    }
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, bw, "standardize_rows");
}

template <typename T>
Tensor<T> standardize_cols(const Tensor<T>& a, T eps, std::span<const std::size_t> lengths) {
  const Shape& s = a.shape();
  const std::size_t batch = s.batch();
  const std::size_t rows = s.rows();
  const std::size_t cols = s.cols();
  std::vector<std::size_t> valid(batch, rows);
  if (!lengths.empty()) {
    if (lengths.size() != batch) {
      throw DimensionError("standardize_cols: " + std::to_string(lengths.size()) +
                           " lengths for batch of " + std::to_string(batch));
    }
    std::copy(lengths.begin(), lengths.end(), valid.begin());
  }
  for (std::size_t len : valid) {
    if (len == 0) throw InputError("token normalization needs at least one row");
    if (len > rows) throw DimensionError("standardize_cols: length exceeds rows of " + s.str());
  }
  const auto& av = a.node().value;
  std::vector<T> out(av.size(), T(0));
  std::vector<T> inv_std(batch * cols);
  std::vector<T> mean(cols), var(cols);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * rows * cols;
    const std::size_t n = valid[b];
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cols; ++c) mean[c] += av[base + r * cols + c];
    }
    for (auto& m : mean) m /= static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const T d = av[base + r * cols + c] - mean[c];
        var[c] += d * d;
      }
    }
    for (std::size_t c = 0; c < cols; ++c) {
      inv_std[b * cols + c] = T(1) / std::sqrt(var[c] / static_cast<T>(n) + eps);
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = base + r * cols + c;
        out[i] = (av[i] - mean[c]) * inv_std[b * cols + c];
      }
    }
  }
  auto bw = [inv_std = std::move(inv_std), valid, rows, cols](detail::Node<T>& self) {
    const auto& y = self.value;
    const auto& g = self.grad;
    auto& ga = self.inputs[0]->grad_buffer();
    std::vector<T> mean_g(cols), mean_gy(cols);
    for (std::size_t b = 0; b < valid.size(); ++b) {
      const std::size_t base = b * rows * cols;
      const std::size_t n = valid[b];
      std::fill(mean_g.begin(), mean_g.end(), T(0));
      std::fill(mean_gy.begin(), mean_gy.end(), T(0));
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = base + r * cols + c;
          mean_g[c] += g[i];
          mean_gy[c] += g[i] * y[i];
        }
      }
      for (std::size_t c = 0; c < cols; ++c) {
        mean_g[c] /= static_cast<T>(n);
        mean_gy[c] /= static_cast<T>(n);
      }
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = base + r * cols + c;
          ga[i] += inv_std[b * cols + c] * (g[i] - mean_g[c] - y[i] * mean_gy[c]);
        }
      }
    }
  };
  return Tensor<T>::make_result(s, std::move(out), {a}, bw, "standardize_cols");
}

template <typename T>
Tensor<T> standardize_cols_prefix(const Tensor<T>& a, T eps, std::span<const std::size_t> lengths) {
  const Shape& s = a.shape();
  const std::size_t batch = s.batch();
  const std::size_t rows = s.rows();
  const std::size_t cols = s.cols();
  std::vector<std::size_t> valid(batch, rows);
  if (!lengths.empty()) {
    if (lengths.size() != batch) {
      throw DimensionError("standardize_cols_prefix: " + std::to_string(lengths.size()) +
                           " lengths for batch of " + std::to_string(batch));
    }
    std::copy(lengths.begin(), lengths.end(), valid.begin());
  }
  for (std::size_t len : valid) {
    if (len == 0) throw InputError("token normalization needs at least one row");
    if (len > rows) throw DimensionError("standardize_cols_prefix: length exceeds rows of " + s.str());
  }
  const auto& av = a.node().value;
  std::vector<T> out(av.size(), T(0));
  // Per (row, column): running mean and inverse std of the prefix window.
  std::vector<double> means(av.size(), 0.0), inv_std(av.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * rows * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      double mean = 0.0, m2 = 0.0;  // Welford accumulators
      for (std::size_t r = 0; r < valid[b]; ++r) {
        const std::size_t i = base + r * cols + c;
        const double x = av[i];
        const double delta = x - mean;
        mean += delta / static_cast<double>(r + 1);
        m2 += delta * (x - mean);
        const double inv = 1.0 / std::sqrt(m2 / static_cast<double>(r + 1) + static_cast<double>(eps));
        means[i] = mean;
        inv_std[i] = inv;
        out[i] = static_cast<T>((x - mean) * inv);
      }
    }
  }
  // With window size c_i, upstream g_i and z_k = (x_k - mean_i) inv_i:
  //   dx_k = sum_{i>=k} inv_i g_i (delta_ki - (1 + z_k y_i) / c_i),
  // evaluated with suffix sums of the terms constant and linear in x_k.
  auto bw = [means = std::move(means), inv_std = std::move(inv_std), valid, rows,
             cols](detail::Node<T>& self) {
    const auto& y = self.value;
    const auto& g = self.grad;
    const auto& x = self.inputs[0]->value;
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < valid.size(); ++b) {
      const std::size_t base = b * rows * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        double alpha_sum = 0.0, beta_sum = 0.0;
        for (std::size_t r = valid[b]; r-- > 0;) {
          const std::size_t i = base + r * cols + c;
          const double a_i = inv_std[i] * g[i] / static_cast<double>(r + 1);
          const double beta = a_i * inv_std[i] * y[i];
          alpha_sum += a_i - beta * means[i];
          beta_sum += beta;
          ga[i] += static_cast<T>(inv_std[i] * g[i] - alpha_sum - beta_sum * x[i]);
        }
      }
    }
  };
  return Tensor<T>::make_result(s, std::move(out), {a}, bw, "standardize_cols_prefix");
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return a;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(a.numel());
  for (auto& m : mask) m = uniform01(rng) < rate ? T(0) : keep_scale;
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto bw = [mask = std::move(mask)](detail::Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * mask[i];
  };
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, bw, "dropout");
}

#define TLAB_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul_transposed(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                \
  template Tensor<T> relu(const Tensor<T>&);                                               \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                       \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                              \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);               \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const TokenId>, std::size_t); \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                     \
  template Tensor<T> standardize_rows(const Tensor<T>&, T);                                \
  template Tensor<T> standardize_cols(const Tensor<T>&, T, std::span<const std::size_t>);  \
  template Tensor<T> standardize_cols_prefix(const Tensor<T>&, T, std::span<const std::size_t>); \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);

TLAB_INSTANTIATE_OPS(float)
TLAB_INSTANTIATE_OPS(double)

#undef TLAB_INSTANTIATE_OPS

}  // namespace tlab
