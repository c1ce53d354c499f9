#include "sgat/autograd.hpp"

#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "sgat/ops.hpp"

namespace sgat {

void screen_finite(const Tensor& t, const char* op_name) {
  visit_dtype(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : t.data<T>()) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite value produced by ") + op_name);
      }
    }
  });
}

Tensor record(Tensor value, const char* name, std::vector<Tensor> inputs, BackwardFn backward) {
  if (checked_mode()) {
    screen_finite(value, name);
  }
  if (!grad_enabled()) {
    return value;
  }
  bool any = false;
  for (const auto& in : inputs) {
    any = any || in.requires_grad();
  }
  if (!any) {
    return value;
  }
  auto node = std::make_shared<Node>();
  node->name = name;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  value.impl()->requires_grad = true;
  value.impl()->grad_fn = std::move(node);
  return value;
}

Tensor GradientMap::operator[](const Tensor& var) const {
  auto it = grads_.find(var.id());
  if (it == grads_.end()) {
    return Tensor::zeros(var.shape(), var.dtype());
  }
  return it->second;
}

namespace {

// Post-order DFS: every node appears after all nodes feeding it.
std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].grad_fn().get();
      if (child != nullptr && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void accumulate(std::unordered_map<const void*, Tensor>& slot, const void* key, Tensor g) {
  auto it = slot.find(key);
  if (it == slot.end()) {
    slot.emplace(key, std::move(g));
  } else {
    it->second = add(it->second, g);
  }
}

struct Targets {
  std::unordered_set<const void*> leaves;  // TensorImpl*
  std::unordered_set<const Node*> nodes;   // interior outputs
  bool all_leaves = false;
};

// Runs reverse accumulation. Node gradients are keyed by Node*, leaf
// gradients by TensorImpl*.
void run_backward(const Tensor& output, const Targets& targets, bool create_graph,
                  std::unordered_map<const void*, Tensor>& leaf_grads,
                  std::unordered_map<const void*, Tensor>& node_grads) {
  if (output.numel() != 1) {
    throw ContractError("backward requires a scalar output, got shape " +
                        shape_str(output.shape()));
  }
  GradModeGuard mode(create_graph);
  Tensor seed = Tensor::ones(output.shape(), output.dtype());
  Node* root = output.grad_fn().get();
  if (root == nullptr) {
    if (output.requires_grad() &&
        (targets.all_leaves || targets.leaves.count(output.id()) != 0)) {
      accumulate(leaf_grads, output.id(), seed);
    }
    return;
  }

  auto order = topological_order(root);

  auto is_target_leaf = [&](const Tensor& t) {
    return t.is_leaf() && t.requires_grad() &&
           (targets.all_leaves || targets.leaves.count(t.id()) != 0);
  };
  // A node is useful when some target lies upstream of it.
  std::unordered_map<const Node*, bool> useful;
  for (Node* n : order) {
    bool u = false;
    for (const auto& in : n->inputs) {
      const Node* g = in.grad_fn().get();
      if (is_target_leaf(in) || (g != nullptr && (targets.nodes.count(g) || useful[g]))) {
        u = true;
        break;
      }
    }
    useful[n] = u;
  }

  node_grads[root] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    auto git = node_grads.find(n);
    if (git == node_grads.end() || !useful[n]) {
      continue;
    }
    Tensor g = git->second;
    std::vector<bool> needs(n->inputs.size());
    bool any = false;
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const auto& in = n->inputs[i];
      const Node* gf = in.grad_fn().get();
      needs[i] = in.requires_grad() &&
                 (is_target_leaf(in) || (gf != nullptr && (targets.nodes.count(gf) || useful[gf])));
      any = any || needs[i];
    }
    if (!any) {
      continue;
    }
    auto input_grads = n->backward(g, needs);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!needs[i] || !input_grads[i].defined()) {
        continue;
      }
      const auto& in = n->inputs[i];
      if (in.grad_fn()) {
        accumulate(node_grads, in.grad_fn().get(), std::move(input_grads[i]));
      } else {
        accumulate(leaf_grads, in.id(), std::move(input_grads[i]));
      }
    }
    // Interior gradients that are not requested are no longer needed.
    if (!targets.nodes.count(n)) {
      node_grads.erase(n);
    }
  }
}

}  // namespace

GradientMap backward(const Tensor& loss, BackwardOptions options) {
  Targets targets;
  targets.all_leaves = true;
  std::unordered_map<const void*, Tensor> leaf_grads;
  std::unordered_map<const void*, Tensor> node_grads;
  run_backward(loss, targets, options.create_graph, leaf_grads, node_grads);
  GradientMap result;
  for (auto& [key, g] : leaf_grads) {
    result.set(key, std::move(g));
  }
  return result;
}

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs,
                         BackwardOptions options) {
  Targets targets;
  for (const auto& in : inputs) {
    if (in.grad_fn()) {
      targets.nodes.insert(in.grad_fn().get());
    } else {
      targets.leaves.insert(in.id());
    }
  }
  std::unordered_map<const void*, Tensor> leaf_grads;
  std::unordered_map<const void*, Tensor> node_grads;
  run_backward(output, targets, options.create_graph, leaf_grads, node_grads);
  std::vector<Tensor> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    const auto& slot = in.grad_fn() ? node_grads : leaf_grads;
    const void* key = in.grad_fn() ? static_cast<const void*>(in.grad_fn().get()) : in.id();
    auto it = slot.find(key);
    if (it != slot.end()) {
      out.push_back(it->second);
    } else {
      out.push_back(Tensor::zeros(in.shape(), in.dtype()));
    }
  }
  return out;
}

}  // namespace sgat
