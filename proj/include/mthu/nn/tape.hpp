#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. A Tape records every operation of one forward pass; backward()
// replays the recorded adjoint functions in reverse order.

#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mthu/errors.hpp"

namespace mthu::nn {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape s, S fill = S(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<S> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) throw ShapeError("Tensor: data size does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape.at(i); }
  S& operator[](std::size_t i) { return data[i]; }
  const S& operator[](std::size_t i) const { return data[i]; }

  bool operator==(const Tensor&) const = default;
};

// Handle to a node on a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class S>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var constant(Shape shape, std::vector<S> value) { return push(std::move(shape), std::move(value), false); }
  Var constant(const Tensor<S>& t) { return push(t.shape, t.data, false); }
  Var variable(const Tensor<S>& t) { return push(t.shape, t.data, true); }

  // New node whose gradient is required when any input requires one.
  Var emit(Shape shape, std::vector<S> value, std::initializer_list<Var> inputs) {
    bool ng = false;
    for (Var v : inputs) ng = ng || node(v).needs_grad;
    return push(std::move(shape), std::move(value), ng);
  }

  void on_backward(Var v, std::function<void()> fn) {
    if (node(v).needs_grad) node(v).backward = std::move(fn);
  }

  const Shape& shape(Var v) const { return node(v).shape; }
  const std::vector<S>& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  Tensor<S> tensor(Var v) const { return Tensor<S>(node(v).shape, node(v).value); }

  // Gradient buffer of v, allocated as zeros on first access.
  std::vector<S>& grad(Var v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad.assign(n.value.size(), S(0));
    return n.grad;
  }
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  void backward(Var root) {
    if (node(root).value.size() != 1) throw ShapeError("Tape::backward: root must be a scalar");
    grad(root)[0] = S(1);
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Var push(Shape shape, std::vector<S> value, bool needs_grad) {
    if (value.size() != numel(shape)) throw ShapeError("Tape: value size does not match shape " + shape_str(shape));
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, needs_grad, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }

  std::deque<Node> nodes_;
};

}  // namespace mthu::nn
