#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "phd/core/tensor.hpp"

namespace phd {

// A node in the reverse-mode tape. Leaves with requires_grad are parameters;
// interior nodes carry the closure that scatters their gradient to parents.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    // Allocates the gradient buffer on first use.
    Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad);

bool grad_enabled();

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Creates the output node of an op. The closure is only kept when recording
// is on and at least one parent needs a gradient.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Seeds d(root)/d(root) = 1 for a scalar root and runs the tape in reverse.
void backward(const Var& root);

}  // namespace phd
