#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

struct Node;
using Var = std::shared_ptr<Node>;

/// One recorded value in the computation graph. Leaves hold parameters or
/// inputs; interior nodes carry a backward function that pushes gradients
/// into their parents.
struct Node {
    Tensor value;
    Tensor grad;                       // allocated lazily during backward
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    const Shape& shape() const { return value.shape(); }
    DType dtype() const { return value.dtype(); }

    /// Accumulation buffer, zero-initialized on first use.
    Tensor& grad_buffer();
};

/// Leaf construction. `requires_grad=true` marks a trainable parameter.
Var make_leaf(Tensor value, bool requires_grad = false);

/// Interior node; backward_fn may be empty when no parent needs gradients.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// True if gradient recording is enabled on this thread (default on).
bool grad_enabled();

/// RAII scope that disables graph construction (inference / FD probes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse-mode sweep from a scalar loss. Every node reachable from the loss
/// receives its fully accumulated gradient exactly once before its backward
/// function runs. Leaf gradients accumulate across calls until cleared.
void backward(const Var& loss);

}  // namespace p3d
