#include "phd/core/autograd.hpp"

#include <unordered_set>

namespace phd {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor::zeros_like(value);
    return grad;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var leaf(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return node;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (!g_grad_enabled) return node;
    bool needs = false;
    for (const auto& p : parents) needs = needs || (p && p->requires_grad);
    if (!needs) return node;
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
    return node;
}

void backward(const Var& root) {
    if (root->value.size() != 1) throw ShapeError("backward() needs a scalar root, got " + shape_str(root->value.shape()));
    if (!root->requires_grad) return;

    // Iterative post-order DFS so deep graphs do not overflow the stack.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && p->backward_fn && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    root->grad_buffer()[0] = Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
    // Interior gradients are transient; drop them so a retained graph is not
    // double-counted if backward runs again.
    for (Node* n : order) {
        if (n->backward_fn) n->grad = Tensor();
    }
}

}  // namespace phd
