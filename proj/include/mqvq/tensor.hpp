#pragma once

// Dense row-major tensor with tape-free reverse-mode differentiation.
//
// Every op output owns a Node that keeps shared references to its inputs and
// a closure that pushes its gradient back into them. Calling backward() on a
// scalar walks the graph in reverse topological order. Parameters are leaf
// nodes: their gradient buffers accumulate across backward passes until
// zero_grad() is called.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mqvq {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the lifetime of the guard (inference, sampling).
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

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using node_type = Node<T>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<node_type>()) {
    node_->value.assign(numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<node_type>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  explicit BasicTensor(std::shared_ptr<node_type> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  // Direct write access; reserved for initialization and optimizer updates.
  std::span<T> mutable_values() { return node_->value; }
  T item() const {
    if (size() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // New leaf sharing no graph with this tensor.
  BasicTensor detach() const { return BasicTensor(shape(), node_->value); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return BasicTensor<U>(shape(), std::move(out));
  }

  const std::shared_ptr<node_type>& node() const { return node_; }

  void backward() const;

 private:
  std::shared_ptr<node_type> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds an op output. The backward closure is attached only when recording
// is enabled and at least one input needs a gradient.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> values,
                           std::initializer_list<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward_fn) {
  BasicTensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<node_type*> order;
  std::unordered_set<node_type*> visited;
  std::vector<std::pair<node_type*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      node_type* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior nodes restart from zero; leaves accumulate.
  for (node_type* n : order) {
    if (n->backward_fn) n->grad.assign(n->value.size(), T(0));
  }
  node_->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace mqvq
