#include "dcct/autograd.hpp"

#include <unordered_set>

#include "dcct/errors.hpp"

namespace dcct {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_kink_active = false;
thread_local std::uint64_t g_kink_hash = 0;

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.data.size() != value.data.size() || grad.shape != value.shape) {
    grad = Tensor(value.shape, 0.0);
  }
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::grad() const { return node_->grad_buffer(); }

void Var::zero_grad() {
  if (!node_->grad.data.empty()) std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0);
}

Var make_result(Tensor value, const std::vector<Var>& parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const auto& p : parents) node->parents.push_back(p.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ShapeError("backward() requires a scalar root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.data.size() == node->value.data.size()) node->backward(*node);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

KinkScope::KinkScope() : previous_active_(g_kink_active), previous_hash_(g_kink_hash) {
  g_kink_active = true;
  g_kink_hash = 0xcbf29ce484222325ULL;
}

KinkScope::~KinkScope() {
  g_kink_active = previous_active_;
  g_kink_hash = previous_hash_;
}

std::uint64_t KinkScope::signature() const { return g_kink_hash; }

void kink_record(std::uint64_t branch) {
  if (!g_kink_active) return;
  g_kink_hash ^= branch + 0x9e3779b97f4a7c15ULL + (g_kink_hash << 6) + (g_kink_hash >> 2);
}

bool kink_tracking() { return g_kink_active; }

}  // namespace dcct
