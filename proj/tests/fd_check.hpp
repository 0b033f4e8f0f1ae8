#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "dfseg/rng.hpp"
#include "dfseg/tensor.hpp"

namespace dfseg::test {

struct FdReport {
    double max_rel_err = 0.0;
    int checked = 0;
};

// Central-difference oracle, independent of the backward pass: re-evaluates
// the loss at value +/- eps per coordinate. `per_leaf` samples a subset of
// coordinates (0 = all); `exclude` skips coordinates (kink neighborhoods).
inline FdReport fd_check(
    const std::function<TensorPtr()>& loss_fn, const std::vector<TensorPtr>& leaves,
    double eps = 1e-4, int per_leaf = 0, Rng* rng = nullptr,
    const std::function<bool(const TensorPtr&, std::size_t)>& exclude = {}) {
    for (const auto& l : leaves) {
        l->ensure_grad();
        l->zero_grad();
    }
    backward(loss_fn());

    FdReport rep;
    for (const auto& leaf : leaves) {
        std::vector<std::size_t> coords;
        if (per_leaf <= 0 || static_cast<std::size_t>(per_leaf) >= leaf->values.size()) {
            coords.resize(leaf->values.size());
            std::iota(coords.begin(), coords.end(), std::size_t{0});
        } else {
            for (int k = 0; k < per_leaf; ++k) {
                coords.push_back(static_cast<std::size_t>(
                    rng ? rng->uniform_index(leaf->values.size()) : static_cast<std::uint64_t>(k)));
            }
        }
        for (std::size_t i : coords) {
            if (exclude && exclude(leaf, i)) continue;
            const double orig = leaf->values[i];
            leaf->values[i] = orig + eps;
            double lp = loss_fn()->values[0];
            leaf->values[i] = orig - eps;
            double lm = loss_fn()->values[0];
            leaf->values[i] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double an = leaf->grad[i];
            double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - an) / denom);
            ++rep.checked;
        }
    }
    return rep;
}

inline TensorPtr random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                               double scale = 1.0) {
    auto t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t->values) v = rng.uniform(-scale, scale);
    return t;
}

}  // namespace dfseg::test
