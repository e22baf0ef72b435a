#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rfm/tensor.hpp"

namespace rfm {

/// One value on the tape. Nodes own their inputs, so a graph lives exactly as
/// long as the outputs referring to it.
struct Node {
  Tensor value;
  Tensor grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient, or zeros of the value's shape when nothing was accumulated.
  Tensor grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates an op output. `backward` is dropped when no input needs a gradient
/// or gradient recording is disabled. Throws std::domain_error on NaN/Inf.
Var make_result(Tensor value, const char* op, std::vector<Var> inputs,
                std::function<void(Node&)> backward);

/// Reverse sweep from a single-element root, seeding d(root)=1.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Fingerprints which side of zero every ReLU input fell on during a forward
/// pass. Two evaluations with equal fingerprints ran through the same linear
/// piece, which is what makes a central difference between them meaningful.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  std::uint64_t fingerprint() const;
  void reset();

  static void record(std::span<const double> pre_activation);

 private:
  KinkProbe* prev_;
  std::uint64_t hash_;
  std::uint64_t count_;
};

}  // namespace rfm
