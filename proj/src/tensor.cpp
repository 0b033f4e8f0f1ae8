#include "dfseg/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace dfseg {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

TensorPtr Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    for (int d : t->shape) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(t->shape));
    }
    t->values.assign(static_cast<std::size_t>(t->numel()), 0.0);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t->values.begin(), t->values.end(), value);
    return t;
}

TensorPtr Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->values = std::move(values);
    t->requires_grad = requires_grad;
    if (static_cast<std::int64_t>(t->values.size()) != t->numel()) {
        throw std::invalid_argument("tensor value count " + std::to_string(t->values.size()) +
                                    " does not match shape " + shape_str(t->shape));
    }
    return t;
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return from_values({1}, {value}, requires_grad);
}

void Tensor::ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> backprop) {
    auto t = Tensor::zeros(std::move(shape));
    bool any_grad = false;
    for (const auto& p : parents) any_grad = any_grad || (p && p->requires_grad);
    if (g_grad_enabled && any_grad) {
        t->requires_grad = true;
        t->parents = std::move(parents);
        t->backprop = std::move(backprop);
    }
    return t;
}

void backward(const TensorPtr& loss) {
    if (!loss) throw std::invalid_argument("backward: null tensor");
    if (!loss->is_scalar()) {
        throw std::invalid_argument("backward: expected scalar loss, got shape " +
                                    shape_str(loss->shape));
    }

    // Iterative post-order DFS; order guarantees inputs precede users.
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> seen;
    struct Frame {
        Tensor* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    if (loss->requires_grad || loss->backprop) {
        stack.push_back({loss.get(), 0});
        seen.insert(loss.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Tensor* p = f.node->parents[f.next_parent++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior gradients are per-call scratch; leaves keep accumulating.
    for (Tensor* t : topo) {
        t->ensure_grad();
        if (!t->is_leaf()) t->zero_grad();
    }
    if (topo.empty()) return;  // loss does not require grad anywhere
    loss->grad[0] += 1.0;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Tensor* t = *it;
        if (t->backprop) t->backprop(*t);
    }
}

}  // namespace dfseg
