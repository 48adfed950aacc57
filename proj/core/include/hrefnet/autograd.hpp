#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hrefnet/tensor.hpp"

namespace hrefnet {

// One vertex of the reverse-mode graph. `backward` reads `grad` and
// accumulates into the grads of `inputs`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
  const Tensor& input_value(std::size_t i) const { return inputs[i]->value; }
  // Grad buffer of input i, or nullptr when that input does not need one.
  Tensor* input_grad(std::size_t i);
};

// Shared handle to a graph node. Copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t axis) const { return node_->value.dim(axis); }

  // Seeds d(self)/d(self) = 1 for a single-element value.
  void backward();
  void backward(const Tensor& seed);
  void zero_grad();

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds a result node. The backward closure is dropped when recording is
// off or no input requires a gradient.
Var make_result(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward);

}  // namespace hrefnet
