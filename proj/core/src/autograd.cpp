#include "hrefnet/autograd.hpp"

#include <unordered_set>

#include "hrefnet/errors.hpp"

namespace hrefnet {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::ensure_grad() {
  if (grad.numel() != value.numel() || grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  }
  return grad;
}

Tensor* Node::input_grad(std::size_t i) {
  Node* in = inputs[i].get();
  if (!in || !in->requires_grad) return nullptr;
  return &in->ensure_grad();
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::backward() {
  if (node_->value.numel() != 1) {
    throw InvalidArgument("backward() without a seed needs a single-element value, got " +
                          shape_string(node_->value.shape()));
  }
  backward(Tensor(node_->value.shape(), 1.0));
}

void Var::backward(const Tensor& seed) {
  if (!node_->requires_grad) return;
  if (seed.shape() != node_->value.shape()) {
    throw InvalidArgument("backward seed shape " + shape_string(seed.shape()) +
                          " does not match value " + shape_string(node_->value.shape()));
  }

  // Iterative post-order DFS; reversed it is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward) continue;
    if (node->grad.numel() == 0) continue;
    node->backward(*node);
    // Interior grads are not needed once propagated.
    node->grad = Tensor();
  }
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward) {
  Var out(std::move(value));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

}  // namespace hrefnet
