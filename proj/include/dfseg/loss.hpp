#pragma once

#include <cstdint>
#include <vector>

#include "dfseg/ops.hpp"
#include "dfseg/tensor.hpp"
#include "dfseg/util.hpp"

namespace dfseg {

// One-hot label tensors matching each supervision level's spatial shape.
// Level 0 is full resolution; deeper levels come from nearest-neighbor
// downsampling of the integer labels, then re-one-hot.
struct LabelPyramid {
    std::vector<TensorPtr> levels;
};

// labels: row-major [n, dims] integer classes in [0, num_classes)
TensorPtr one_hot(const std::vector<std::uint8_t>& labels, int n, Dims3 dims, int num_classes);

LabelPyramid build_label_pyramid(const std::vector<std::uint8_t>& labels, int n, Dims3 dims,
                                 int num_classes,
                                 const std::vector<std::vector<int>>& level_shapes);

// Mean over voxels of -log softmax probability of the true class; the target
// must be strictly one-hot.
TensorPtr cross_entropy(const TensorPtr& logits, const TensorPtr& target_onehot);

// soft_dice comes from ops.hpp unchanged.

// weights 1/2^d, exact: [1, 0.5, 0.25, ...]
std::vector<double> deep_supervision_weights(int levels);

// sum_d 1/2^d * (CE_d + Dice_d)
TensorPtr deep_supervised_loss(const std::vector<TensorPtr>& logit_levels,
                               const LabelPyramid& pyramid, double dice_smooth = 1e-5);

// Soft-target CE at full resolution only; rows must sum to 1 within 1e-5.
TensorPtr mixup_loss(const TensorPtr& logits, const TensorPtr& mixed_target);

}  // namespace dfseg
