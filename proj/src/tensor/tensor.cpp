#include "tlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace tlab {

Shape::Shape(std::initializer_list<std::size_t> dims) {
  if (dims.size() > kMaxRank) {
    throw DimensionError("tensors support at most 3 dimensions, got " +
                         std::to_string(dims.size()));
  }
  std::copy(dims.begin(), dims.end(), dims_.begin());
  rank_ = dims.size();
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::size_t Shape::rows() const {
  if (rank_ < 2) return 1;
  return dims_[rank_ - 2];
}

std::string Shape::str() const {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) out << 'x';
    out << dims_[i];
  }
  out << ']';
  return out.str();
}

bool operator==(const Shape& a, const Shape& b) {
  if (a.rank_ != b.rank_) return false;
  for (std::size_t i = 0; i < a.rank_; ++i) {
    if (a.dims_[i] != b.dims_[i]) return false;
  }
  return true;
}

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

namespace detail {

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), T(0));
  return grad;
}

}  // namespace detail

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<T>(shape.numel(), T(0)), requires_grad) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<NodeType>()) {
  if (values.size() != shape.numel()) {
    throw DimensionError("shape " + shape.str() + " needs " +
                         std::to_string(shape.numel()) + " values, got " +
                         std::to_string(values.size()));
  }
  node_->shape = shape;
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::filled(Shape shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape.numel(), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values,
                                 std::vector<Tensor> inputs,
                                 BackwardFn backward, const char* op) {
  Tensor out(shape, std::move(values), false);
  out.node_->op = op;
  if (!GradMode::enabled()) return out;
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
  if (!tracked) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  if (!is_leaf()) {
    throw ContractError(std::string("values of '") + node_->op +
                        "' output are immutable; only leaves may be modified");
  }
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() needs a single-element tensor, got " + shape().str());
  }
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
  const Shape& s = shape();
  if (row >= s.rows() || col >= s.cols()) {
    throw IndexError("index (" + std::to_string(row) + "," + std::to_string(col) +
                     ") outside " + s.str());
  }
  return node_->value[row * s.cols() + col];
}

template <typename T>
T Tensor<T>::at(std::size_t batch, std::size_t row, std::size_t col) const {
  const Shape& s = shape();
  if (batch >= s.batch() || row >= s.rows() || col >= s.cols()) {
    throw IndexError("index (" + std::to_string(batch) + "," + std::to_string(row) +
                     "," + std::to_string(col) + ") outside " + s.str());
  }
  return node_->value[(batch * s.rows() + row) * s.cols() + col];
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->value, false);
}

template <typename T>
ComputationRecord<T>::ComputationRecord(const Tensor<T>& root) {
  // Iterative post-order DFS; recursion depth would scale with graph depth.
  using NodeT = detail::Node<T>;
  std::unordered_set<const NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  NodeT* start = &root.node();
  if (!start->requires_grad) return;
  stack.emplace_back(start, 0);
  visited.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + loss.shape().str());
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss does not depend on any tensor that requires grad");
  }
  ComputationRecord<T> record(loss);
  auto nodes = record.nodes();
  for (auto* node : nodes) {
    if (node->backward) std::fill(node->grad.begin(), node->grad.end(), T(0));
  }
  loss.node().grad_buffer()[0] += T(1);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    auto* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  for (T v : t.values()) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value in " + what);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template struct detail::Node<float>;
template struct detail::Node<double>;
template class ComputationRecord<float>;
template class ComputationRecord<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template void check_finite(const Tensor<float>&, const std::string&);
template void check_finite(const Tensor<double>&, const std::string&);

}  // namespace tlab
