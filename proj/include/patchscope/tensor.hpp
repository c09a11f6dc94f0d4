#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <unordered_set>
#include <vector>

#include "patchscope/common.hpp"

namespace patchscope {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first use; same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Receives this node after its grad is final; scatters into parent grads.
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording in scope (inference / data preparation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Dense row-major tensor handle. Copying copies the handle, not the buffer;
// clone() deep-copies. Scalar type T is float or double, selected per run.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_vector(std::move(shape), {});
  }

  static Tensor full(Shape shape, T value) {
    auto t = Tensor();
    t.n_ = std::make_shared<Node>();
    t.n_->data.assign(static_cast<std::size_t>(numel(shape)), value);
    t.n_->shape = std::move(shape);
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<T> data) {
    auto t = Tensor();
    t.n_ = std::make_shared<Node>();
    const auto n = static_cast<std::size_t>(numel(shape));
    if (data.empty()) {
      data.assign(n, T(0));
    } else if (data.size() != n) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(n_->data.size()); }

  T* data() { return n_->data.data(); }
  const T* data() const { return n_->data.data(); }
  std::vector<T>& vec() { return n_->data; }
  const std::vector<T>& vec() const { return n_->data; }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  T* grad() { return n_->ensure_grad().data(); }
  const std::vector<T>& grad_vec() const { return n_->grad; }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1) {
      throw ConfigError("item() on non-scalar tensor of shape " +
                        shape_str(shape()));
    }
    return n_->data[0];
  }

  // Deep copy of the values only (no graph, no grad).
  Tensor clone() const {
    return from_vector(n_->shape, n_->data);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(n_->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<U>(n_->data[i]);
    }
    return Tensor<U>::from_vector(n_->shape, std::move(out));
  }

  // Reverse-mode sweep from this (scalar) tensor. Parameter grads
  // accumulate across calls until zero_grad(). The recorded graph is
  // released afterwards.
  void backward() {
    if (size() != 1) {
      throw ConfigError("backward() requires a scalar loss, got shape " +
                        shape_str(shape()));
    }
    // Topological order over the recorded graph (iterative DFS). The order
    // holds shared ownership: the sweep below drops parent links as it
    // goes, which would otherwise free interior nodes mid-walk.
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
    stack.emplace_back(n_, 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->parents.size()) {
        std::shared_ptr<Node> p = top.first->parents[top.second++];
        if (p->requires_grad && !seen.count(p.get())) {
          seen.insert(p.get());
          // May reallocate the stack; 'top' is not touched afterwards.
          stack.emplace_back(std::move(p), 0);
        }
      } else {
        order.push_back(top.first);
        stack.pop_back();
      }
    }
    n_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = it->get();
      if (node->backward_fn) {
        node->backward_fn(*node);
        node->backward_fn = nullptr;
      }
      node->parents.clear();
    }
  }

  std::shared_ptr<Node>& node() { return n_; }
  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Builds an op output node. Records parents and the backward closure only
// when grad recording is on and some parent participates in the graph.
template <typename T>
Tensor<T> make_op_output(
    Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
    std::function<void(detail::TensorNode<T>&)> backward_fn) {
  auto out = Tensor<T>::from_vector(std::move(shape), std::move(data));
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      out.set_requires_grad(true);
      auto& n = *out.node();
      n.parents.reserve(parents.size());
      for (auto& p : parents) n.parents.push_back(p.node());
      n.backward_fn = std::move(backward_fn);
    }
  }
  return out;
}

template <typename T>
void assert_all_finite(const Tensor<T>& t, const char* context) {
  for (const T v : t.vec()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string("non-finite value in ") + context);
    }
  }
}

}  // namespace patchscope
