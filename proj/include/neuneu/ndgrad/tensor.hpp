#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "neuneu/error.hpp"

namespace neuneu::nd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major tensor in double precision. Copies share storage; ops never
// write into their inputs, so a tensor is immutable once produced. Parameters
// are the exception: the optimizer updates them in place between steps.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) shape = {1};
    for (auto e : shape) {
      if (e == 0) throw InvalidArgument("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_size(shape) != data.size()) {
      throw InvalidArgument("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // In-place access for parameter updates and initialization only.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }
  double item() const {
    if (size() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Gradient accumulated by the last backward pass; all zeros if the tensor
  // was not on the path to the loss.
  std::span<const double> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  Tensor detach() const { return Tensor(shape(), values(), false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared_node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of backward closures. Ops append to the active tape of the
// calling thread; with no active tape nothing is recorded (inference mode).
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded op exactly once in
  // reverse order. Gradients accumulate into leaf tensors; the tape is
  // cleared afterwards.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw InvalidArgument("backward requires a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (loss.requires_grad()) {
      loss.node()->ensure_grad()[0] += 1.0;
      for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(active_tape()) { active_tape() = &tape; }
  ~TapeScope() { active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the enclosed scope.
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape()) { active_tape() = nullptr; }
  ~NoGradScope() { active_tape() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

inline bool tracking(const std::vector<Tensor>& inputs) {
  if (active_tape() == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

// Wraps a freshly computed result. When tracking, `make_backward` is invoked
// with the output node and must return the closure to record.
template <typename MakeBackward>
Tensor finish(Shape shape, std::vector<double> data, bool track, MakeBackward&& make_backward) {
  Tensor out(std::move(shape), std::move(data), track);
  if (track) active_tape()->record(make_backward(out.shared_node()));
  return out;
}

}  // namespace detail

}  // namespace neuneu::nd
