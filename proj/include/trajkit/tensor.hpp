#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "trajkit/common.hpp"

namespace trajkit {

// Storage node shared by tensor handles. `grad` stays empty until the
// backward pass first touches this node.
template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool requires_grad = false;
};

template <typename S>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<TensorNode<S>>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_->value.assign(shape_numel(shape), S(0));
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, S fill) {
    Tensor t;
    t.node_->value.assign(shape_numel(shape), fill);
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<S> values) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    return t;
  }

  static Tensor scalar(S v) { return from_vector({1}, {v}); }

  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  std::vector<S>& values() { return node_->value; }
  const std::vector<S>& values() const { return node_->value; }

  S item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const { return node_->grad; }
  std::vector<S>& grad() { return node_->grad; }

  void zero_grad() { node_->grad.clear(); }

  // Deep copy of the value buffer; gradient state is not copied.
  Tensor clone() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<S>> node_;
};

template <typename S>
inline std::vector<S>& ensure_grad(const std::shared_ptr<TensorNode<S>>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), S(0));
  return n->grad;
}

// Ordered record of executed primitives. Ops append their backward closure
// when any input participates in differentiation; backward replays the
// record in reverse exactly once.
template <typename S>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return ops_.size(); }

  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) {
      throw ShapeError("backward: loss has shape " + shape_str(loss.shape()) +
                       ", expected a scalar");
    }
    if (consumed_) {
      throw NumericFault("backward: tape already consumed; reset it first");
    }
    ensure_grad(loss.node());
    loss.node()->grad[0] = S(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    consumed_ = true;
  }

  void reset() {
    ops_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

template <typename S>
inline Tape<S>*& active_tape() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}

// RAII activation of a tape on the current thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(active_tape<S>()) {
    active_tape<S>() = &tape;
  }
  ~TapeScope() { active_tape<S>() = prev_; }

  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

}  // namespace trajkit
