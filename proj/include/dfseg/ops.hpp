#pragma once

#include "dfseg/tensor.hpp"
#include "dfseg/util.hpp"

namespace dfseg {

// All 5-D tensors are [N, C, D, H, W] with (D, H, W) = (z, y, x).
// Strides/paddings are per-axis (z, y, x) triples.

TensorPtr conv3d(const TensorPtr& input, const TensorPtr& weight, const TensorPtr& bias,
                 Dims3 stride, Dims3 padding);

// weight layout [Cin, Cout, kd, kh, kw]; output size (in-1)*stride + kernel,
// zero-padding convention fixed (no output cropping).
TensorPtr conv3d_transposed(const TensorPtr& input, const TensorPtr& weight,
                            const TensorPtr& bias, Dims3 stride);

TensorPtr instance_norm(const TensorPtr& input, const TensorPtr& gamma, const TensorPtr& beta,
                        double eps = 1e-5);

TensorPtr leaky_relu(const TensorPtr& input, double slope = 0.01);
TensorPtr sigmoid(const TensorPtr& input);
TensorPtr softmax_channel(const TensorPtr& input);

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& x, double factor);
TensorPtr concat_channel(const TensorPtr& a, const TensorPtr& b);
TensorPtr sum(const TensorPtr& x);
TensorPtr mean(const TensorPtr& x);

// [N,C,D,H,W] -> [N,C]; mean over the spatial voxels
TensorPtr global_avg_pool(const TensorPtr& x);
// x[N,F] * w[O,F]^T + b[O] -> [N,O]
TensorPtr fully_connected(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias);
// per-voxel reduction over channels -> [N,1,D,H,W]
TensorPtr channel_mean(const TensorPtr& x);
TensorPtr channel_max(const TensorPtr& x);
// broadcast gates
TensorPtr mul_channel_gate(const TensorPtr& x, const TensorPtr& gate);  // gate [N,C]
TensorPtr mul_spatial_gate(const TensorPtr& x, const TensorPtr& gate);  // gate [N,1,D,H,W]

// Mean over voxels of -sum_c target_c * log softmax_c. Targets are constants
// (no gradient); rows must sum to 1 within tol. strict_onehot additionally
// requires every entry to be exactly 0 or 1.
TensorPtr soft_cross_entropy(const TensorPtr& logits, const TensorPtr& target,
                             bool strict_onehot = false, double row_sum_tol = 1e-5);

// 1 - mean over foreground classes of (2*I_c + smooth) / (P_c + G_c + smooth)
// on softmax probabilities; class 0 is background and excluded.
TensorPtr soft_dice(const TensorPtr& logits, const TensorPtr& target, double smooth = 1e-5);

}  // namespace dfseg
