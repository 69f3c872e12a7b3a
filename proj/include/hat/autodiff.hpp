#pragma once

// Reverse-mode differentiation over a dynamically recorded graph.
//
// Each op returns a Var that owns its value and, when any input requires a
// gradient, a closure that pushes the output gradient back into the inputs.
// backward() runs every closure exactly once in reverse topological order and
// then releases the graph; a second call on the same graph is an error.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hat/tensor.hpp"

namespace hat {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty() && !consumed; }
  /// Gradient buffer, zero-filled on first use.
  Tensor<T>& grad_buffer();
};

template <typename T>
class Var {
 public:
  Var() = default;

  /// Trainable leaf; gradients accumulate across backward() calls until zero_grad().
  static Var parameter(Tensor<T> value, std::string name = {});
  static Var constant(Tensor<T> value);

  /// Result of an op. `backward` is dropped when no input requires a gradient.
  static Var from_op(Tensor<T> value, std::vector<Var> inputs,
                     std::function<void(Node<T>&)> backward);

  explicit operator bool() const { return node_ != nullptr; }

  const Tensor<T>& value() const { return node_->value; }
  /// Direct write access, for optimizers and finite-difference probes.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; a zero tensor when nothing has flowed back yet.
  Tensor<T> grad() const;
  void zero_grad();

  const std::string& name() const { return node_->name; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Populates gradients of every reachable trainable leaf from a scalar loss.
template <typename T>
void backward(const Var<T>& loss);

}  // namespace hat
