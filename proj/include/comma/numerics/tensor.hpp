#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "comma/errors.hpp"

namespace comma {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the computation graph. Leaves have no backward rule; interior
// nodes carry the parents they were computed from and a closure holding
// whatever forward values the backward rule needs.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient has been produced
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major tensor of doubles with reverse-mode graph linkage.
///
/// A Tensor is a cheap handle: copies share the same node. Use clone() for an
/// independent leaf holding the same values.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape.empty()) throw DimensionError("tensor needs at least one extent");
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    auto n = values.size();
    return from({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().data.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape()[1] : shape()[0]; }

  std::span<const double> data() const { return node().data; }
  // Write access is for leaves only (optimizers, initializers); mutating an
  // interior node would silently invalidate cached backward values.
  std::span<double> mutable_data() {
    if (!node().is_leaf()) throw ContractError("mutable_data on a non-leaf tensor");
    return node().data;
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }
  double operator[](std::size_t i) const { return node().data[i]; }
  double at(std::size_t r, std::size_t c) const { return node().data[r * cols() + c]; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node().is_leaf()) throw ContractError("requires_grad can only be set on leaves");
    node().requires_grad = flag;
  }
  bool is_leaf() const { return node().is_leaf(); }
  const char* op() const { return node().op; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() {
    auto& g = node().grad;
    if (g.empty()) {
      g.assign(numel(), 0.0);
    } else {
      std::fill(g.begin(), g.end(), 0.0);
    }
  }
  void clear_grad() { node().grad.clear(); }

  /// New leaf sharing no graph history; values copied.
  Tensor detach() const { return from(shape(), node().data, false); }
  Tensor clone(bool requires_grad) const { return from(shape(), node().data, requires_grad); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Builds the output of a differentiable op. Graph linkage is recorded only
// when grad mode is on and at least one input needs a gradient.
template <class Backward>
Tensor record(Shape shape, std::vector<double> values, const char* op,
              std::vector<Tensor> inputs, Backward&& backward) {
  check_finite(values, op);
  auto out = Tensor::from(std::move(shape), std::move(values));
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  auto& node = out.node();
  node.op = op;
  if (needs) {
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (auto& t : inputs) node.parents.push_back(t.node_ptr());
    node.backward = std::forward<Backward>(backward);
  }
  return out;
}

inline std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; deep transformer graphs overflow naive recursion.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !seen.count(parent)) {
        seen.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed each time. Every tensor listed in
/// `leaves` is guaranteed a (possibly zero) gradient afterwards, which is how
/// unreachable parameters end up with zeros.
inline void backward(const Tensor& loss, std::span<Tensor> leaves = {}) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar root, got shape " + shape_str(loss.shape()));
  }
  for (auto& leaf : leaves) {
    if (!leaf.has_grad()) leaf.zero_grad();
  }
  if (!loss.requires_grad()) return;
  auto order = detail::topo_order(&loss.node());
  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
  }
  order.back()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->is_leaf()) node->backward(*node);
  }
  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.clear();
  }
}

inline void backward(const Tensor& loss, std::vector<Tensor>& leaves) {
  backward(loss, std::span<Tensor>(leaves));
}

}  // namespace comma
