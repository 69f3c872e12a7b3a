#include "hat/autodiff.hpp"

#include <unordered_set>
#include <utility>

namespace hat {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad = Tensor<T>(value.shape());
  return grad;
}

template <typename T>
Var<T> Var<T>::parameter(Tensor<T> value, std::string name) {
  Var v;
  v.node_ = std::make_shared<Node<T>>();
  v.node_->value = std::move(value);
  v.node_->requires_grad = true;
  v.node_->name = std::move(name);
  return v;
}

template <typename T>
Var<T> Var<T>::constant(Tensor<T> value) {
  Var v;
  v.node_ = std::make_shared<Node<T>>();
  v.node_->value = std::move(value);
  return v;
}

template <typename T>
Var<T> Var<T>::from_op(Tensor<T> value, std::vector<Var> inputs,
                       std::function<void(Node<T>&)> backward) {
  Var v;
  v.node_ = std::make_shared<Node<T>>();
  v.node_->value = std::move(value);
  bool needs_grad = false;
  for (const auto& in : inputs) {
    if (in.node_->consumed) {
      throw Error("op input '" + in.name() + "' belongs to a graph already consumed by backward()");
    }
    needs_grad = needs_grad || in.node_->requires_grad;
  }
  if (needs_grad) {
    v.node_->requires_grad = true;
    v.node_->backward = std::move(backward);
    v.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) v.node_->inputs.push_back(std::move(in.node_));
  }
  return v;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
  if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
  return node_->grad;
}

template <typename T>
void Var<T>::zero_grad() {
  node_->grad = Tensor<T>();
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss) throw Error("backward() on an empty Var");
  if (loss.value().size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " +
                         loss.shape().to_string());
  }
  Node<T>* root = loss.node();
  if (root->consumed) throw Error("backward() already called on this graph");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; each node enters `order` exactly once. `order`
  // owns the nodes so clearing inputs below cannot free a pending node.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{loss.node_ptr(), 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      std::shared_ptr<Node<T>> child = node->inputs[next++];
      if (child->requires_grad && seen.insert(child.get()).second) {
        if (child->consumed) throw Error("backward() reached a consumed graph node");
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root->grad_buffer().fill(T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(*node);
    node->backward = nullptr;
    node->inputs.clear();
    node->grad = Tensor<T>();
    node->consumed = true;
  }
}

template struct Node<float>;
template struct Node<double>;
template class Var<float>;
template class Var<double>;
template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace hat
