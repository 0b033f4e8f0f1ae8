#include "dfseg/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace dfseg {

TensorPtr one_hot(const std::vector<std::uint8_t>& labels, int n, Dims3 dims, int num_classes) {
    const std::int64_t V = voxel_count(dims);
    if (static_cast<std::int64_t>(labels.size()) != n * V) {
        throw std::invalid_argument("one_hot: label count does not match batch dims");
    }
    auto t = Tensor::zeros({n, num_classes, dims[0], dims[1], dims[2]});
    for (int b = 0; b < n; ++b) {
        for (std::int64_t v = 0; v < V; ++v) {
            int cls = labels[static_cast<std::size_t>(b) * V + v];
            if (cls >= num_classes) {
                throw std::invalid_argument("one_hot: label " + std::to_string(cls) +
                                            " out of range");
            }
            t->values[(static_cast<std::int64_t>(b) * num_classes + cls) * V + v] = 1.0;
        }
    }
    return t;
}

LabelPyramid build_label_pyramid(const std::vector<std::uint8_t>& labels, int n, Dims3 dims,
                                 int num_classes,
                                 const std::vector<std::vector<int>>& level_shapes) {
    LabelPyramid pyr;
    const std::int64_t V = voxel_count(dims);
    for (const auto& shape : level_shapes) {
        if (shape.size() != 5) throw std::invalid_argument("label pyramid: level rank must be 5");
        Dims3 ld = {shape[2], shape[3], shape[4]};
        Dims3 factor;
        for (int a = 0; a < 3; ++a) {
            if (ld[a] <= 0 || dims[a] % ld[a] != 0) {
                throw std::invalid_argument("label pyramid: level dims do not divide full dims");
            }
            factor[a] = dims[a] / ld[a];
        }
        if (factor == Dims3{1, 1, 1}) {
            pyr.levels.push_back(one_hot(labels, n, dims, num_classes));
            continue;
        }
        std::vector<std::uint8_t> down(static_cast<std::size_t>(n) * voxel_count(ld));
        std::size_t o = 0;
        for (int b = 0; b < n; ++b) {
            const std::uint8_t* src = labels.data() + static_cast<std::size_t>(b) * V;
            for (int z = 0; z < ld[0]; ++z) {
                for (int y = 0; y < ld[1]; ++y) {
                    for (int x = 0; x < ld[2]; ++x) {
                        std::int64_t idx =
                            (static_cast<std::int64_t>(z) * factor[0] * dims[1] +
                             static_cast<std::int64_t>(y) * factor[1]) * dims[2] +
                            static_cast<std::int64_t>(x) * factor[2];
                        down[o++] = src[idx];
                    }
                }
            }
        }
        pyr.levels.push_back(one_hot(down, n, ld, num_classes));
    }
    return pyr;
}

TensorPtr cross_entropy(const TensorPtr& logits, const TensorPtr& target_onehot) {
    return soft_cross_entropy(logits, target_onehot, /*strict_onehot=*/true);
}

std::vector<double> deep_supervision_weights(int levels) {
    std::vector<double> w(levels);
    for (int d = 0; d < levels; ++d) w[d] = std::ldexp(1.0, -d);
    return w;
}

TensorPtr deep_supervised_loss(const std::vector<TensorPtr>& logit_levels,
                               const LabelPyramid& pyramid, double dice_smooth) {
    if (logit_levels.size() != pyramid.levels.size()) {
        throw std::invalid_argument("deep_supervised_loss: " +
                                    std::to_string(logit_levels.size()) + " logit levels vs " +
                                    std::to_string(pyramid.levels.size()) + " label levels");
    }
    if (logit_levels.empty()) {
        throw std::invalid_argument("deep_supervised_loss: no levels");
    }
    auto weights = deep_supervision_weights(static_cast<int>(logit_levels.size()));
    TensorPtr total;
    for (std::size_t d = 0; d < logit_levels.size(); ++d) {
        auto term = add(cross_entropy(logit_levels[d], pyramid.levels[d]),
                        soft_dice(logit_levels[d], pyramid.levels[d], dice_smooth));
        auto weighted = scale(term, weights[d]);
        total = total ? add(total, weighted) : weighted;
    }
    return total;
}

TensorPtr mixup_loss(const TensorPtr& logits, const TensorPtr& mixed_target) {
    return soft_cross_entropy(logits, mixed_target, /*strict_onehot=*/false, 1e-5);
}

}  // namespace dfseg
