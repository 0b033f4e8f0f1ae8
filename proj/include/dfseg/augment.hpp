#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dfseg/rng.hpp"
#include "dfseg/util.hpp"
#include "dfseg/volume.hpp"

namespace dfseg {

using FlipAxes = std::array<bool, 3>;  // (z, y, x)

template <typename T>
std::vector<T> flip_copy(const std::vector<T>& vox, Dims3 dims, FlipAxes flips) {
    const int Z = dims[0], Y = dims[1], X = dims[2];
    std::vector<T> out(vox.size());
    std::size_t o = 0;
    for (int z = 0; z < Z; ++z) {
        int sz = flips[0] ? Z - 1 - z : z;
        for (int y = 0; y < Y; ++y) {
            int sy = flips[1] ? Y - 1 - y : y;
            const T* row = vox.data() + (static_cast<std::int64_t>(sz) * Y + sy) * X;
            if (flips[2]) {
                for (int x = 0; x < X; ++x) out[o++] = row[X - 1 - x];
            } else {
                std::copy_n(row, X, out.data() + o);
                o += X;
            }
        }
    }
    return out;
}

// Image patch with its integer labels; channels are double planes ready to
// become tensor rows.
struct Patch {
    Dims3 dims{0, 0, 0};
    std::vector<std::vector<double>> channels;
    std::vector<std::uint8_t> labels;
    Dims3 center{0, 0, 0};  // sampled center voxel, kept for diagnostics/tests
};

std::vector<std::int64_t> foreground_indices(const LabelMap& labels);

// Center is a uniformly chosen foreground voxel with probability fg_prob,
// otherwise uniform over the volume; falls back to uniform when the volume
// has no foreground. Regions outside the volume are zero-padded. Origin is
// clamped so the patch covers as much of the volume as it can.
Patch sample_patch(const std::vector<const Volume*>& channels, const LabelMap& labels,
                   Dims3 patch_size, double fg_prob, Rng& rng,
                   const std::vector<std::int64_t>* fg_cache = nullptr);

void apply_flips(Patch& patch, FlipAxes flips);

// Flips each axis allowed by axes_mask with probability 1/2; image and labels
// stay voxel-aligned. Returns the flips that were applied.
FlipAxes random_flip(Patch& patch, FlipAxes axes_mask, Rng& rng);

struct MixUpSample {
    Dims3 dims{0, 0, 0};
    std::vector<std::vector<double>> channels;
    std::vector<double> soft_labels;  // [num_classes, voxels]
    double lambda = 1.0;
    int source_i = -1, source_j = -1;
};

// lambda ~ Beta(alpha, alpha); convex combination of patches and of their
// one-hot labels.
MixUpSample mixup(const Patch& xi, const Patch& xj, int num_classes, double alpha, Rng& rng);
MixUpSample mixup_with_lambda(const Patch& xi, const Patch& xj, int num_classes, double lambda);

// Cubic curve with fixed endpoints (0,0) and (1,1) over normalized intensity.
// The x-component must be monotone (p1x <= p2x), which makes it invertible.
struct BezierCurve {
    double p1x = 1.0 / 3.0, p1y = 1.0 / 3.0;
    double p2x = 2.0 / 3.0, p2y = 2.0 / 3.0;

    static BezierCurve identity() { return {}; }
    // control points with both coordinate pairs sorted ascending, giving a
    // non-decreasing intensity mapping
    static BezierCurve random_monotone(Rng& rng);

    double x_of_t(double t) const;
    double y_of_t(double t) const;
};

// Min-max normalize, map each voxel through the curve (inverting the
// x-component), restore the original range. Constant volumes are returned
// unchanged.
Volume bezier_intensity(const Volume& v, const BezierCurve& curve);

}  // namespace dfseg
