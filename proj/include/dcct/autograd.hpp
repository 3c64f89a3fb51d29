#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dcct/tensor.hpp"

namespace dcct {

// One vertex of the reverse-mode tape. `backward` reads `grad` of this node
// and accumulates into the gradients of `parents`.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-initialized on first use.
  Tensor& grad_buffer();
};

using NodePtr = std::shared_ptr<Node>;

// Handle to a tape node. Copies alias the same node, so a parameter held by
// several modules is a single tensor.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  // Gradient after backward(); a zero tensor when nothing flowed here.
  const Tensor& grad() const;
  void zero_grad();

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Builds a result node. When gradients are disabled or no parent requires
// them, the node is a constant leaf and `backward_fn` is dropped.
Var make_result(Tensor value, const std::vector<Var>& parents, std::function<void(Node&)> backward_fn);

// Reverse sweep from a scalar root. Gradients accumulate into leaves.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Records which side of every non-differentiable point (ReLU, hinge, max)
// a forward pass took. Two passes with different signatures straddle a kink,
// so a finite difference across them is not a derivative estimate.
class KinkScope {
 public:
  KinkScope();
  ~KinkScope();
  KinkScope(const KinkScope&) = delete;
  KinkScope& operator=(const KinkScope&) = delete;

  std::uint64_t signature() const;

 private:
  bool previous_active_;
  std::uint64_t previous_hash_;
};

void kink_record(std::uint64_t branch);
bool kink_tracking();

}  // namespace dcct
