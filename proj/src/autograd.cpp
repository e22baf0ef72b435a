#include "rfm/autograd.hpp"

#include <stdexcept>
#include <string>
#include <unordered_set>

namespace rfm {

namespace {

thread_local bool g_grad_enabled = true;
thread_local KinkProbe* g_probe = nullptr;

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_) return {};
  if (node_->grad.empty()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                std::function<void(Node&)> backward) {
  if (!value.all_finite()) {
    throw std::domain_error(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root) throw std::invalid_argument("backward on empty Var");
  if (root.value().numel() != 1) {
    throw std::invalid_argument("backward root must have one element, got shape " +
                                shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Interior gradients are only needed during the sweep.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

KinkProbe::KinkProbe() : prev_(g_probe), hash_(1469598103934665603ULL), count_(0) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = prev_; }

std::uint64_t KinkProbe::fingerprint() const { return hash_ ^ (count_ * 0x9E3779B97F4A7C15ULL); }

void KinkProbe::reset() {
  hash_ = 1469598103934665603ULL;
  count_ = 0;
}

void KinkProbe::record(std::span<const double> pre_activation) {
  KinkProbe* p = g_probe;
  if (!p) return;
  std::uint64_t word = 0;
  int bits = 0;
  auto flush = [&] {
    p->hash_ ^= word;
    p->hash_ *= 1099511628211ULL;
    p->hash_ ^= p->hash_ >> 29;
    word = 0;
    bits = 0;
  };
  for (double v : pre_activation) {
    word = (word << 1) | (v > 0.0 ? 1u : 0u);
    if (++bits == 64) flush();
  }
  if (bits) flush();
  p->count_ += pre_activation.size();
}

}  // namespace rfm
