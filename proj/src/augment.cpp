#include "dfseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dfseg/kernels.hpp"

namespace dfseg {

std::vector<std::int64_t> foreground_indices(const LabelMap& labels) {
    std::vector<std::int64_t> out;
    for (std::size_t i = 0; i < labels.vox.size(); ++i) {
        if (labels.vox[i] != 0) out.push_back(static_cast<std::int64_t>(i));
    }
    return out;
}

Patch sample_patch(const std::vector<const Volume*>& channels, const LabelMap& labels,
                   Dims3 patch_size, double fg_prob, Rng& rng,
                   const std::vector<std::int64_t>* fg_cache) {
    if (channels.empty()) throw std::invalid_argument("sample_patch: no channels");
    const Dims3 vd = labels.dims;
    for (const Volume* ch : channels) {
        if (ch->dims != vd) throw std::invalid_argument("sample_patch: channel dims mismatch");
    }
    std::vector<std::int64_t> local_fg;
    const std::vector<std::int64_t>* fg = fg_cache;
    if (!fg) {
        local_fg = foreground_indices(labels);
        fg = &local_fg;
    }

    std::int64_t center_idx;
    if (!fg->empty() && rng.uniform() < fg_prob) {
        center_idx = (*fg)[rng.uniform_index(fg->size())];
    } else {
        center_idx = static_cast<std::int64_t>(rng.uniform_index(labels.vox.size()));
    }
    Dims3 center;
    center[0] = static_cast<int>(center_idx / (static_cast<std::int64_t>(vd[1]) * vd[2]));
    int rem = static_cast<int>(center_idx % (static_cast<std::int64_t>(vd[1]) * vd[2]));
    center[1] = rem / vd[2];
    center[2] = rem % vd[2];

    Dims3 origin;
    for (int a = 0; a < 3; ++a) {
        int lo = std::min(0, vd[a] - patch_size[a]);
        int hi = std::max(0, vd[a] - patch_size[a]);
        origin[a] = std::clamp(center[a] - patch_size[a] / 2, lo, hi);
    }

    Patch p;
    p.dims = patch_size;
    p.center = center;
    const std::int64_t n = voxel_count(patch_size);
    p.labels.assign(static_cast<std::size_t>(n), 0);
    p.channels.resize(channels.size());
    for (auto& ch : p.channels) ch.assign(static_cast<std::size_t>(n), 0.0);

    for (int z = 0; z < patch_size[0]; ++z) {
        int sz = origin[0] + z;
        if (sz < 0 || sz >= vd[0]) continue;
        for (int y = 0; y < patch_size[1]; ++y) {
            int sy = origin[1] + y;
            if (sy < 0 || sy >= vd[1]) continue;
            int x_lo = std::max(0, -origin[2]);
            int x_hi = std::min(patch_size[2], vd[2] - origin[2]);
            if (x_lo >= x_hi) continue;
            std::int64_t dst = (static_cast<std::int64_t>(z) * patch_size[1] + y) * patch_size[2];
            std::int64_t src = (static_cast<std::int64_t>(sz) * vd[1] + sy) * vd[2] + origin[2];
            for (int x = x_lo; x < x_hi; ++x) p.labels[dst + x] = labels.vox[src + x];
            for (std::size_t c = 0; c < channels.size(); ++c) {
                const float* srow = channels[c]->vox.data() + src;
                double* drow = p.channels[c].data() + dst;
                for (int x = x_lo; x < x_hi; ++x) drow[x] = srow[x];
            }
        }
    }
    return p;
}

void apply_flips(Patch& patch, FlipAxes flips) {
    if (!flips[0] && !flips[1] && !flips[2]) return;
    for (auto& ch : patch.channels) ch = flip_copy(ch, patch.dims, flips);
    patch.labels = flip_copy(patch.labels, patch.dims, flips);
}

FlipAxes random_flip(Patch& patch, FlipAxes axes_mask, Rng& rng) {
    FlipAxes flips{false, false, false};
    for (int a = 0; a < 3; ++a) {
        if (axes_mask[a]) flips[a] = rng.bernoulli(0.5);
    }
    apply_flips(patch, flips);
    return flips;
}

MixUpSample mixup_with_lambda(const Patch& xi, const Patch& xj, int num_classes, double lambda) {
    if (xi.dims != xj.dims || xi.channels.size() != xj.channels.size()) {
        throw std::invalid_argument("mixup: patch shapes differ");
    }
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("mixup: lambda outside [0,1]");
    const std::int64_t n = voxel_count(xi.dims);
    MixUpSample out;
    out.dims = xi.dims;
    out.lambda = lambda;
    out.channels.resize(xi.channels.size());
    for (std::size_t c = 0; c < xi.channels.size(); ++c) {
        out.channels[c].resize(static_cast<std::size_t>(n));
        kern::ops().lerp(out.channels[c].data(), xi.channels[c].data(), xj.channels[c].data(),
                         lambda, static_cast<std::size_t>(n));
    }
    out.soft_labels.assign(static_cast<std::size_t>(num_classes) * n, 0.0);
    for (std::int64_t v = 0; v < n; ++v) {
        out.soft_labels[static_cast<std::int64_t>(xi.labels[v]) * n + v] += lambda;
        out.soft_labels[static_cast<std::int64_t>(xj.labels[v]) * n + v] += 1.0 - lambda;
    }
    return out;
}

MixUpSample mixup(const Patch& xi, const Patch& xj, int num_classes, double alpha, Rng& rng) {
    if (!(alpha > 0.0)) throw std::invalid_argument("mixup: alpha must be positive");
    return mixup_with_lambda(xi, xj, num_classes, rng.beta(alpha, alpha));
}

BezierCurve BezierCurve::random_monotone(Rng& rng) {
    BezierCurve c;
    double x1 = rng.uniform(), x2 = rng.uniform();
    double y1 = rng.uniform(), y2 = rng.uniform();
    c.p1x = std::min(x1, x2);
    c.p2x = std::max(x1, x2);
    c.p1y = std::min(y1, y2);
    c.p2y = std::max(y1, y2);
    return c;
}

double BezierCurve::x_of_t(double t) const {
    double u = 1.0 - t;
    return 3.0 * u * u * t * p1x + 3.0 * u * t * t * p2x + t * t * t;
}

double BezierCurve::y_of_t(double t) const {
    double u = 1.0 - t;
    return 3.0 * u * u * t * p1y + 3.0 * u * t * t * p2y + t * t * t;
}

Volume bezier_intensity(const Volume& v, const BezierCurve& curve) {
    for (double c : {curve.p1x, curve.p2x, curve.p1y, curve.p2y}) {
        if (c < 0.0 || c > 1.0) {
            throw std::invalid_argument("bezier_intensity: control points must lie in [0,1]^2");
        }
    }
    if (curve.p1x > curve.p2x) {
        throw std::invalid_argument("bezier_intensity: p1x > p2x makes the curve non-invertible");
    }
    auto [mn, mx] = std::minmax_element(v.vox.begin(), v.vox.end());
    double lo = *mn, hi = *mx;
    if (!(hi > lo)) return v;  // degenerate constant volume

    constexpr int kSamples = 2048;
    std::vector<double> xs(kSamples), ys(kSamples);
    for (int k = 0; k < kSamples; ++k) {
        double t = static_cast<double>(k) / (kSamples - 1);
        xs[k] = curve.x_of_t(t);
        ys[k] = curve.y_of_t(t);
    }
    auto map01 = [&](double u) {
        auto it = std::lower_bound(xs.begin(), xs.end(), u);
        if (it == xs.begin()) return ys.front();
        if (it == xs.end()) return ys.back();
        std::size_t k = static_cast<std::size_t>(it - xs.begin());
        double x0 = xs[k - 1], x1 = xs[k];
        double frac = x1 > x0 ? (u - x0) / (x1 - x0) : 0.0;
        return ys[k - 1] + frac * (ys[k] - ys[k - 1]);
    };

    Volume out;
    out.dims = v.dims;
    out.spacing = v.spacing;
    out.vox.resize(v.vox.size());
    double range = hi - lo, inv = 1.0 / range;
    for (std::size_t i = 0; i < v.vox.size(); ++i) {
        double u = (v.vox[i] - lo) * inv;
        out.vox[i] = static_cast<float>(lo + range * map01(std::clamp(u, 0.0, 1.0)));
    }
    return out;
}

}  // namespace dfseg
