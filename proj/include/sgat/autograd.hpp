#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgat/tensor.hpp"

namespace sgat {

/// Receives the gradient of the node's output and a mask of which inputs
/// need a gradient; returns one entry per input (undefined when not needed).
/// Implementations express their math through Tensor ops, so running them
/// with recording enabled yields differentiable gradients.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_output, const std::vector<bool>& needs)>;

/// One recorded operation. Nodes reference their inputs, so the graph is a
/// DAG ordered by construction: an input always exists before its consumer.
struct Node {
  const char* name = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

/// Wraps a freshly computed value as the output of a recorded op when
/// recording is enabled and any input requires a gradient. Runs the
/// checked-mode screen.
Tensor record(Tensor value, const char* name, std::vector<Tensor> inputs, BackwardFn backward);

void screen_finite(const Tensor& t, const char* op_name);

/// Gradients keyed by variable identity.
class GradientMap {
 public:
  bool contains(const Tensor& var) const { return grads_.count(var.id()) != 0; }
  /// Gradient of var; zeros of var's shape when var was unreachable.
  Tensor operator[](const Tensor& var) const;
  std::size_t size() const { return grads_.size(); }
  void set(const void* var_id, Tensor grad) { grads_[var_id] = std::move(grad); }

 private:
  std::unordered_map<const void*, Tensor> grads_;
};

struct BackwardOptions {
  /// Record the backward computation itself so the gradients can be
  /// differentiated again.
  bool create_graph = false;
};

/// Gradients of a scalar loss with respect to every requires_grad leaf
/// reachable from it.
GradientMap backward(const Tensor& loss, BackwardOptions options = {});

/// Gradients of a scalar output with respect to the given tensors, which
/// may be leaves or intermediate results. Unreachable inputs get zeros.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> inputs,
                         BackwardOptions options = {});

}  // namespace sgat
