#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cisunet/core/tensor.hpp"

namespace cisunet {

/// Thread-local switch for tape recording. When disabled, ops compute values
/// only and drop parent links, so intermediate activations free as soon as
/// their handles go out of scope (important for whole-volume inference).
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grads
  bool requires_grad = false;

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(value.shape);
  }
};

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Handle to a tape node. Cheap to copy; identity is the node pointer.
template <typename T>
struct Var {
  NodePtr<T> n;

  Var() = default;
  explicit Var(NodePtr<T> p) : n(std::move(p)) {}

  static Var leaf(Tensor<T> v, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(v);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  bool defined() const { return n != nullptr; }
  const Tensor<T>& val() const { return n->value; }
  Tensor<T>& val() { return n->value; }
  Tensor<T>& grad() const {
    n->ensure_grad();
    return n->grad;
  }
  void zero_grad() const {
    if (n->grad.defined()) n->grad.fill((T)0);
  }
};

/// Wraps a freshly computed output into a tape node. Parent links and the
/// backward closure are kept only when recording is on and some parent
/// requires grad.
template <typename T>
Var<T> make_op(Tensor<T> out, std::vector<NodePtr<T>> parents,
               std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  bool need = false;
  if (g_grad_enabled)
    for (auto& p : parents)
      if (p && p->requires_grad) need = true;
  if (need) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
    node->requires_grad = true;
  }
  return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar root. Seeds d(root)/d(root) = 1, walks
/// the tape in reverse topological order, then severs parent links so the
/// graph's memory is reclaimed immediately.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.val().numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(root.val().shape));

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.n.get(), 0});
  seen.insert(root.n.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.n->ensure_grad();
  root.n->grad.data()[0] = (T)1;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
  // Break links so intermediates free now rather than when handles die.
  for (Node<T>* node : order) {
    if (!node->parents.empty()) {
      node->parents.clear();
      node->backward_fn = nullptr;
    }
  }
}

}  // namespace cisunet
