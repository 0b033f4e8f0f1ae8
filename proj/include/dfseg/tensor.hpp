#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dfseg {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor recording a reverse-mode graph. Values are doubles
// (reductions stay in double regardless of what callers feed in); parameters
// are kept f32-representable by the optimizer so checkpoints round-trip
// bit-exactly.
//
// Values are treated as immutable once a node has consumers; gradient
// buffers are the only mutable part. A graph belongs to one thread.
struct Tensor : std::enable_shared_from_this<Tensor> {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily, only when requires_grad
    bool requires_grad = false;

    // autograd wiring; leaves have no backprop function
    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backprop;

    static TensorPtr zeros(std::vector<int> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<int> shape, double value, bool requires_grad = false);
    static TensorPtr from_values(std::vector<int> shape, std::vector<double> values,
                                 bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
    bool is_leaf() const { return !backprop; }
    bool is_scalar() const { return numel() == 1; }

    void ensure_grad();
    void zero_grad();

    // Gradient accumulation entry point used by backprop functions; no-op for
    // tensors that do not require grad (e.g. label constants).
    double* grad_data() { return grad.data(); }
};

std::string shape_str(const std::vector<int>& shape);

// Thread-local recording switch. Inside a NoGradGuard ops compute values but
// record no parents, so inference builds no graph.
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

// Reverse-topological sweep from a scalar loss. Interior gradients are reset
// per call; leaf gradients accumulate across calls until zero_grad().
void backward(const TensorPtr& loss);

// Graph node factory shared by the op implementations.
TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> parents,
                    std::function<void(Tensor&)> backprop);

}  // namespace dfseg
