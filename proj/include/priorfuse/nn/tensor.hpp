#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "priorfuse/core/error.hpp"

namespace priorfuse::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int d) { return a * static_cast<std::size_t>(d); });
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// One value in the reverse-mode graph. `backward` reads this node's grad and
// accumulates into its parents' grads.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad{false};
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Shape shape, std::vector<T> values) { return leaf(std::move(shape), std::move(values), false); }

  static Var parameter(Shape shape, std::vector<T> values) { return leaf(std::move(shape), std::move(values), true); }

  static Var zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(numel(shape), T(0));
    return leaf(std::move(shape), std::move(v), requires_grad);
  }

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  static Var leaf(Shape shape, std::vector<T> values, bool requires_grad) {
    if (values.size() != numel(shape)) {
      throw DimensionMismatch("tensor value count " + std::to_string(values.size()) + " does not match shape " +
                              shape_string(shape));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. The backward closure is only retained when grad mode
// is on and some parent needs a gradient.
template <class T, class Backward>
Var<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Var<T>*> parents,
                   Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const Var<T>* p : parents) needs = needs || (p && *p && p->requires_grad());
  }
  if (needs) {
    n->requires_grad = true;
    for (const Var<T>* p : parents)
      if (p && *p) n->parents.push_back(p->shared());
    n->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(n));
}

template <class T>
Var<T> make_result_list(Shape shape, std::vector<T> value, const std::vector<Var<T>>& parents,
                        std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return Var<T>(std::move(n));
}

// Reverse sweep from `root`, seeding d(root)/d(root) with `seed` (ones when empty).
template <class T>
void backward(const Var<T>& root, std::span<const T> seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto g = root.node()->grad_buffer();
  if (seed.empty()) {
    for (auto& v : g) v += T(1);
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior grads are scratch; leaves keep theirs for the optimizer.
  for (Node<T>* n : order) {
    if (n->backward) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace priorfuse::nn
