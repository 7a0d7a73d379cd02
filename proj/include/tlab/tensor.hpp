#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tlab/errors.hpp"

namespace tlab {

// Extents of a dense row-major tensor, rank 0 (scalar) through 3.
// Rank-3 tensors are read as [batch x rows x cols].
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 3;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t axis) const { return dims_[axis]; }
  std::size_t numel() const;

  std::size_t batch() const { return rank_ == 3 ? dims_[0] : 1; }
  std::size_t rows() const;
  std::size_t cols() const { return rank_ == 0 ? 1 : dims_[rank_ - 1]; }

  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b);

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  // Returns the grad buffer, allocating zeros on first use.
  std::vector<T>& grad_buffer();
};

}  // namespace detail

// Process-wide switch for graph recording (per thread).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Handle to a value node in the computation graph. Copies share the node.
// Values are immutable once produced by an operation; only leaves expose
// mutable storage (for optimizers and finite-difference probes).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;
  using BackwardFn = std::function<void(NodeType&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor filled(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Builds the output of an operation. Inputs and the backward rule are only
  // retained when grad mode is on and some input requires grad.
  static Tensor make_result(Shape shape, std::vector<T> values,
                            std::vector<Tensor> inputs, BackwardFn backward,
                            const char* op);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values();
  T item() const;
  T at(std::size_t row, std::size_t col) const;
  T at(std::size_t batch, std::size_t row, std::size_t col) const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty() && !node_->backward; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  // New leaf holding a copy of the values, disconnected from the graph.
  Tensor detach() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const char* op_name() const { return node_->op; }

  NodeType& node() const { return *node_; }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  std::shared_ptr<NodeType> node_;
};

// Topologically ordered list of nodes reachable from a root (inputs first).
template <typename T>
class ComputationRecord {
 public:
  explicit ComputationRecord(const Tensor<T>& root);

  std::span<detail::Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<detail::Node<T>*> order_;
};

// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
// intermediate gradients are reset at the start of each sweep.
template <typename T>
void backward(const Tensor<T>& loss);

// Entry of a parameter registry.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Throws NumericalError naming `what` if any value is NaN or infinite.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what);

}  // namespace tlab
