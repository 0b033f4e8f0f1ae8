#include "dfseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <stdexcept>

#include "dfseg/kernels.hpp"

namespace dfseg {

std::int64_t BodyMask::count() const {
    std::int64_t n = 0;
    for (auto v : vox) n += v != 0;
    return n;
}

std::vector<std::int32_t> connected_components_26(const std::vector<std::uint8_t>& mask,
                                                  Dims3 dims,
                                                  std::vector<std::int64_t>& component_sizes) {
    const int Z = dims[0], Y = dims[1], X = dims[2];
    const std::int64_t n = voxel_count(dims);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(n), 0);
    component_sizes.clear();
    std::int32_t next = 0;
    std::vector<std::int64_t> queue;
    for (std::int64_t seed = 0; seed < n; ++seed) {
        if (!mask[seed] || labels[seed]) continue;
        ++next;
        std::int64_t size = 0;
        queue.clear();
        queue.push_back(seed);
        labels[seed] = next;
        while (!queue.empty()) {
            std::int64_t cur = queue.back();
            queue.pop_back();
            ++size;
            int z = static_cast<int>(cur / (static_cast<std::int64_t>(Y) * X));
            int rem = static_cast<int>(cur % (static_cast<std::int64_t>(Y) * X));
            int y = rem / X, x = rem % X;
            for (int dz = -1; dz <= 1; ++dz) {
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!dz && !dy && !dx) continue;
                        int nz = z + dz, ny = y + dy, nx = x + dx;
                        if (nz < 0 || nz >= Z || ny < 0 || ny >= Y || nx < 0 || nx >= X) continue;
                        std::int64_t ni = (static_cast<std::int64_t>(nz) * Y + ny) * X + nx;
                        if (mask[ni] && !labels[ni]) {
                            labels[ni] = next;
                            queue.push_back(ni);
                        }
                    }
                }
            }
        }
        component_sizes.push_back(size);
    }
    return labels;
}

std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, Dims3 dims) {
    std::vector<std::int64_t> sizes;
    auto labels = connected_components_26(mask, dims, sizes);
    std::vector<std::uint8_t> out(mask.size(), 0);
    if (sizes.empty()) return out;
    std::int32_t best =
        static_cast<std::int32_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin()) + 1;
    for (std::size_t i = 0; i < mask.size(); ++i) out[i] = labels[i] == best ? 1 : 0;
    return out;
}

namespace {

std::vector<Dims3> ball_offsets(int radius) {
    std::vector<Dims3> offs;
    for (int dz = -radius; dz <= radius; ++dz) {
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                if (dz * dz + dy * dy + dx * dx <= radius * radius) {
                    offs.push_back({dz, dy, dx});
                }
            }
        }
    }
    return offs;
}

std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& mask, Dims3 dims,
                                 const std::vector<Dims3>& offs) {
    const int Z = dims[0], Y = dims[1], X = dims[2];
    std::vector<std::uint8_t> out(mask.size(), 0);
    for (int z = 0; z < Z; ++z) {
        for (int y = 0; y < Y; ++y) {
            for (int x = 0; x < X; ++x) {
                std::int64_t i = (static_cast<std::int64_t>(z) * Y + y) * X + x;
                if (!mask[i]) continue;
                for (const auto& o : offs) {
                    int nz = z + o[0], ny = y + o[1], nx = x + o[2];
                    if (nz < 0 || nz >= Z || ny < 0 || ny >= Y || nx < 0 || nx >= X) continue;
                    out[(static_cast<std::int64_t>(nz) * Y + ny) * X + nx] = 1;
                }
            }
        }
    }
    return out;
}

std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& mask, Dims3 dims,
                                const std::vector<Dims3>& offs) {
    const int Z = dims[0], Y = dims[1], X = dims[2];
    std::vector<std::uint8_t> out(mask.size(), 0);
    for (int z = 0; z < Z; ++z) {
        for (int y = 0; y < Y; ++y) {
            for (int x = 0; x < X; ++x) {
                std::int64_t i = (static_cast<std::int64_t>(z) * Y + y) * X + x;
                if (!mask[i]) continue;
                bool keep = true;
                for (const auto& o : offs) {
                    int nz = z + o[0], ny = y + o[1], nx = x + o[2];
                    // treat outside as background so the border erodes
                    if (nz < 0 || nz >= Z || ny < 0 || ny >= Y || nx < 0 || nx >= X ||
                        !mask[(static_cast<std::int64_t>(nz) * Y + ny) * X + nx]) {
                        keep = false;
                        break;
                    }
                }
                out[i] = keep ? 1 : 0;
            }
        }
    }
    return out;
}

}  // namespace

void morph_close_ball(std::vector<std::uint8_t>& mask, Dims3 dims, int radius) {
    if (radius <= 0) return;
    auto offs = ball_offsets(radius);
    mask = erode(dilate(mask, dims, offs), dims, offs);
}

void fill_holes(std::vector<std::uint8_t>& mask, Dims3 dims) {
    const int Z = dims[0], Y = dims[1], X = dims[2];
    const std::int64_t n = voxel_count(dims);
    // 6-connected flood of the background from the border; unreached
    // background voxels are interior cavities
    std::vector<std::uint8_t> outside(static_cast<std::size_t>(n), 0);
    std::deque<std::int64_t> queue;
    auto try_seed = [&](int z, int y, int x) {
        std::int64_t i = (static_cast<std::int64_t>(z) * Y + y) * X + x;
        if (!mask[i] && !outside[i]) {
            outside[i] = 1;
            queue.push_back(i);
        }
    };
    for (int z = 0; z < Z; ++z) {
        for (int y = 0; y < Y; ++y) {
            try_seed(z, y, 0);
            try_seed(z, y, X - 1);
        }
    }
    for (int z = 0; z < Z; ++z) {
        for (int x = 0; x < X; ++x) {
            try_seed(z, 0, x);
            try_seed(z, Y - 1, x);
        }
    }
    for (int y = 0; y < Y; ++y) {
        for (int x = 0; x < X; ++x) {
            try_seed(0, y, x);
            try_seed(Z - 1, y, x);
        }
    }
    const int dz[6] = {1, -1, 0, 0, 0, 0};
    const int dy[6] = {0, 0, 1, -1, 0, 0};
    const int dx[6] = {0, 0, 0, 0, 1, -1};
    while (!queue.empty()) {
        std::int64_t cur = queue.front();
        queue.pop_front();
        int z = static_cast<int>(cur / (static_cast<std::int64_t>(Y) * X));
        int rem = static_cast<int>(cur % (static_cast<std::int64_t>(Y) * X));
        int y = rem / X, x = rem % X;
        for (int k = 0; k < 6; ++k) {
            int nz = z + dz[k], ny = y + dy[k], nx = x + dx[k];
            if (nz < 0 || nz >= Z || ny < 0 || ny >= Y || nx < 0 || nx >= X) continue;
            std::int64_t ni = (static_cast<std::int64_t>(nz) * Y + ny) * X + nx;
            if (!mask[ni] && !outside[ni]) {
                outside[ni] = 1;
                queue.push_back(ni);
            }
        }
    }
    for (std::int64_t i = 0; i < n; ++i) {
        if (!mask[i] && !outside[i]) mask[i] = 1;
    }
}

BodyMask body_mask(const Volume& v, double threshold, int close_radius) {
    std::vector<std::uint8_t> m(v.vox.size(), 0);
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < v.vox.size(); ++i) {
        if (v.vox[i] > threshold) {
            m[i] = 1;
            ++hits;
        }
    }
    if (hits == 0) {
        throw std::runtime_error("body_mask: no voxel exceeds threshold " +
                                 std::to_string(threshold) + "; unusable scan");
    }
    m = largest_component(m, v.dims);
    morph_close_ball(m, v.dims, close_radius);
    fill_holes(m, v.dims);
    m = largest_component(m, v.dims);  // output contract: exactly one component

    BodyMask out;
    out.dims = v.dims;
    out.vox = std::move(m);
    out.z0 = v.dims[0];
    out.y0 = v.dims[1];
    out.x0 = v.dims[2];
    out.z1 = out.y1 = out.x1 = -1;
    for (int z = 0; z < v.dims[0]; ++z) {
        for (int y = 0; y < v.dims[1]; ++y) {
            for (int x = 0; x < v.dims[2]; ++x) {
                if (!out.vox[(static_cast<std::int64_t>(z) * v.dims[1] + y) * v.dims[2] + x]) {
                    continue;
                }
                out.z0 = std::min(out.z0, z);
                out.z1 = std::max(out.z1, z);
                out.y0 = std::min(out.y0, y);
                out.y1 = std::max(out.y1, y);
                out.x0 = std::min(out.x0, x);
                out.x1 = std::max(out.x1, x);
            }
        }
    }
    return out;
}

namespace {

template <typename T>
std::vector<T> crop_yx(const std::vector<T>& vox, Dims3 dims, int y0, int y1, int x0, int x1) {
    const int Z = dims[0], Y = dims[1], X = dims[2];
    const int ny = y1 - y0 + 1, nx = x1 - x0 + 1;
    std::vector<T> out(static_cast<std::size_t>(Z) * ny * nx);
    std::size_t o = 0;
    for (int z = 0; z < Z; ++z) {
        for (int y = y0; y <= y1; ++y) {
            const T* row = vox.data() + (static_cast<std::int64_t>(z) * Y + y) * X + x0;
            std::copy_n(row, nx, out.data() + o);
            o += nx;
        }
    }
    return out;
}

void check_nonempty(const BodyMask& m) {
    if (m.y1 < m.y0 || m.x1 < m.x0) throw std::invalid_argument("crop_to_mask: empty mask");
}

}  // namespace

Volume crop_to_mask(const Volume& v, const BodyMask& m) {
    check_nonempty(m);
    Volume out;
    out.dims = {v.dims[0], m.y1 - m.y0 + 1, m.x1 - m.x0 + 1};
    out.spacing = v.spacing;
    out.vox = crop_yx(v.vox, v.dims, m.y0, m.y1, m.x0, m.x1);
    return out;
}

LabelMap crop_to_mask(const LabelMap& v, const BodyMask& m) {
    check_nonempty(m);
    LabelMap out;
    out.dims = {v.dims[0], m.y1 - m.y0 + 1, m.x1 - m.x0 + 1};
    out.spacing = v.spacing;
    out.vox = crop_yx(v.vox, v.dims, m.y0, m.y1, m.x0, m.x1);
    return out;
}

BodyMask crop_mask(const BodyMask& m) {
    check_nonempty(m);
    BodyMask out;
    out.dims = {m.dims[0], m.y1 - m.y0 + 1, m.x1 - m.x0 + 1};
    out.vox = crop_yx(m.vox, m.dims, m.y0, m.y1, m.x0, m.x1);
    out.z0 = m.z0;
    out.z1 = m.z1;
    out.y0 = 0;
    out.y1 = out.dims[1] - 1;
    out.x0 = 0;
    out.x1 = out.dims[2] - 1;
    return out;
}

namespace {

struct Cdf {
    double lo, width;  // value range and bin width
    std::vector<double> cum;  // cumulative fraction at each bin's upper edge

    // quantile of a value, interpolated within its bin
    double forward(double x) const {
        int bins = static_cast<int>(cum.size());
        double rel = (x - lo) / width;
        int b = std::clamp(static_cast<int>(rel), 0, bins - 1);
        double clo = b == 0 ? 0.0 : cum[b - 1];
        double chi = cum[b];
        double frac = std::clamp(rel - b, 0.0, 1.0);
        return clo + frac * (chi - clo);
    }

    // value at a quantile, interpolated within the first bin reaching it
    double inverse(double u) const {
        int bins = static_cast<int>(cum.size());
        auto it = std::lower_bound(cum.begin(), cum.end(), u);
        int b = std::min(static_cast<int>(it - cum.begin()), bins - 1);
        double clo = b == 0 ? 0.0 : cum[b - 1];
        double chi = cum[b];
        double frac = chi > clo ? std::clamp((u - clo) / (chi - clo), 0.0, 1.0) : 0.0;
        return lo + (b + frac) * width;
    }
};

Cdf build_cdf(const Volume& v, int bins, const char* role) {
    auto [mn, mx] = std::minmax_element(v.vox.begin(), v.vox.end());
    double lo = *mn, hi = *mx;
    if (!(hi > lo)) {
        throw std::runtime_error(std::string("match_histogram: constant ") + role + " volume");
    }
    Cdf cdf;
    cdf.lo = lo;
    cdf.width = (hi - lo) / bins;
    std::vector<std::int64_t> counts(static_cast<std::size_t>(bins), 0);
    for (float f : v.vox) {
        int b = std::clamp(static_cast<int>((f - lo) / cdf.width), 0, bins - 1);
        ++counts[b];
    }
    cdf.cum.resize(bins);
    double total = static_cast<double>(v.vox.size());
    std::int64_t running = 0;
    for (int b = 0; b < bins; ++b) {
        running += counts[b];
        cdf.cum[b] = static_cast<double>(running) / total;
    }
    return cdf;
}

}  // namespace

Volume match_histogram(const Volume& source, const Volume& reference, int bins) {
    if (bins < 2) throw std::invalid_argument("match_histogram: bins must be >= 2");
    Cdf ref = build_cdf(reference, bins, "reference");

    Volume out;
    out.dims = source.dims;
    out.spacing = source.spacing;
    out.vox.resize(source.vox.size());

    auto [mn, mx] = std::minmax_element(source.vox.begin(), source.vox.end());
    if (!(*mx > *mn)) {
        // degenerate source CDF: every voxel sits at the same quantile
        float v = static_cast<float>(ref.inverse(0.5));
        std::fill(out.vox.begin(), out.vox.end(), v);
        return out;
    }
    Cdf src = build_cdf(source, bins, "source");
    for (std::size_t i = 0; i < source.vox.size(); ++i) {
        out.vox[i] = static_cast<float>(ref.inverse(src.forward(source.vox[i])));
    }
    return out;
}

namespace {

Dims3 resampled_dims(Dims3 dims, Spacing3 spacing, Spacing3 target) {
    Dims3 out;
    for (int a = 0; a < 3; ++a) {
        if (!(target[a] > 0.0)) {
            throw std::invalid_argument("resample: target spacing must be positive");
        }
        out[a] = std::max(1, static_cast<int>(std::llround(dims[a] * spacing[a] / target[a])));
    }
    return out;
}

}  // namespace

Volume resample_image(const Volume& v, Spacing3 target) {
    Dims3 nd = resampled_dims(v.dims, v.spacing, target);
    Volume out;
    out.dims = nd;
    out.spacing = target;
    out.vox.resize(static_cast<std::size_t>(voxel_count(nd)));
    const int Z = v.dims[0], Y = v.dims[1], X = v.dims[2];
    // voxel-center alignment through the dims ratio; identity when dims match
    const double fz = static_cast<double>(Z) / nd[0];
    const double fy = static_cast<double>(Y) / nd[1];
    const double fx = static_cast<double>(X) / nd[2];
    std::size_t o = 0;
    for (int z = 0; z < nd[0]; ++z) {
        double sz = (z + 0.5) * fz - 0.5;
        int z0 = std::clamp(static_cast<int>(std::floor(sz)), 0, Z - 1);
        int z1 = std::min(z0 + 1, Z - 1);
        double wz = std::clamp(sz - z0, 0.0, 1.0);
        for (int y = 0; y < nd[1]; ++y) {
            double sy = (y + 0.5) * fy - 0.5;
            int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, Y - 1);
            int y1 = std::min(y0 + 1, Y - 1);
            double wy = std::clamp(sy - y0, 0.0, 1.0);
            for (int x = 0; x < nd[2]; ++x) {
                double sx = (x + 0.5) * fx - 0.5;
                int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, X - 1);
                int x1 = std::min(x0 + 1, X - 1);
                double wx = std::clamp(sx - x0, 0.0, 1.0);
                double c00 = v.at(z0, y0, x0) * (1 - wx) + v.at(z0, y0, x1) * wx;
                double c01 = v.at(z0, y1, x0) * (1 - wx) + v.at(z0, y1, x1) * wx;
                double c10 = v.at(z1, y0, x0) * (1 - wx) + v.at(z1, y0, x1) * wx;
                double c11 = v.at(z1, y1, x0) * (1 - wx) + v.at(z1, y1, x1) * wx;
                double c0 = c00 * (1 - wy) + c01 * wy;
                double c1 = c10 * (1 - wy) + c11 * wy;
                out.vox[o++] = static_cast<float>(c0 * (1 - wz) + c1 * wz);
            }
        }
    }
    return out;
}

LabelMap resample_labels_to(const LabelMap& m, Dims3 nd, Spacing3 target_spacing) {
    LabelMap out;
    out.dims = nd;
    out.spacing = target_spacing;
    out.vox.resize(static_cast<std::size_t>(voxel_count(nd)));
    const int Z = m.dims[0], Y = m.dims[1], X = m.dims[2];
    const double fz = static_cast<double>(Z) / nd[0];
    const double fy = static_cast<double>(Y) / nd[1];
    const double fx = static_cast<double>(X) / nd[2];
    std::size_t o = 0;
    for (int z = 0; z < nd[0]; ++z) {
        int sz = std::clamp(static_cast<int>(std::llround((z + 0.5) * fz - 0.5)), 0, Z - 1);
        for (int y = 0; y < nd[1]; ++y) {
            int sy = std::clamp(static_cast<int>(std::llround((y + 0.5) * fy - 0.5)), 0, Y - 1);
            for (int x = 0; x < nd[2]; ++x) {
                int sx = std::clamp(static_cast<int>(std::llround((x + 0.5) * fx - 0.5)), 0, X - 1);
                out.vox[o++] = m.at(sz, sy, sx);
            }
        }
    }
    return out;
}

LabelMap resample_labels(const LabelMap& m, Spacing3 target) {
    return resample_labels_to(m, resampled_dims(m.dims, m.spacing, target), target);
}

BodyMask resample_mask_to(const BodyMask& m, Dims3 nd) {
    LabelMap tmp;
    tmp.dims = m.dims;
    tmp.spacing = {1, 1, 1};
    tmp.vox = m.vox;
    LabelMap r = resample_labels_to(tmp, nd, {1, 1, 1});
    BodyMask out;
    out.dims = nd;
    out.vox = std::move(r.vox);
    out.z0 = 0;
    out.z1 = nd[0] - 1;
    out.y0 = 0;
    out.y1 = nd[1] - 1;
    out.x0 = 0;
    out.x1 = nd[2] - 1;
    return out;
}

Volume zscore(const Volume& v, const BodyMask* mask) {
    if (mask && mask->vox.size() != v.vox.size()) {
        throw std::invalid_argument("zscore: mask dims do not match volume");
    }
    double sum = 0.0;
    std::int64_t n = 0;
    if (mask) {
        for (std::size_t i = 0; i < v.vox.size(); ++i) {
            if (mask->vox[i]) {
                sum += v.vox[i];
                ++n;
            }
        }
    } else {
        sum = kern::ops().sum_f(v.vox.data(), v.vox.size());
        n = static_cast<std::int64_t>(v.vox.size());
    }
    if (n == 0) throw std::runtime_error("zscore: empty normalization region");
    double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < v.vox.size(); ++i) {
        if (mask && !mask->vox[i]) continue;
        double d = v.vox[i] - mean;
        ss += d * d;
    }
    double stddev = std::sqrt(ss / static_cast<double>(n));
    if (!(stddev > 0.0)) {
        throw std::runtime_error("zscore: zero standard deviation over the region");
    }
    Volume out;
    out.dims = v.dims;
    out.spacing = v.spacing;
    out.vox.resize(v.vox.size());
    double inv = 1.0 / stddev;
    for (std::size_t i = 0; i < v.vox.size(); ++i) {
        out.vox[i] = static_cast<float>((v.vox[i] - mean) * inv);
    }
    return out;
}

KvConfig GeometryLog::to_kv() const {
    KvConfig kv;
    auto dims_str = [](Dims3 d) {
        return std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]);
    };
    auto sp_str = [](Spacing3 s) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", s[0], s[1], s[2]);
        return std::string(buf);
    };
    kv.set("orig_dims", dims_str(orig_dims));
    kv.set("orig_spacing", sp_str(orig_spacing));
    kv.set("crop_y0", std::to_string(crop_y0));
    kv.set("crop_x0", std::to_string(crop_x0));
    kv.set("cropped_dims", dims_str(cropped_dims));
    kv.set("final_dims", dims_str(final_dims));
    kv.set("final_spacing", sp_str(final_spacing));
    return kv;
}

GeometryLog GeometryLog::from_kv(const KvConfig& kv) {
    GeometryLog g;
    auto parse_dims = [&](const std::string& key) {
        auto parts = split(kv.get(key), ',');
        if (parts.size() != 3) throw std::runtime_error("geometry log: bad " + key);
        return Dims3{std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])};
    };
    auto parse_sp = [&](const std::string& key) {
        auto parts = split(kv.get(key), ',');
        if (parts.size() != 3) throw std::runtime_error("geometry log: bad " + key);
        return Spacing3{std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
    };
    g.orig_dims = parse_dims("orig_dims");
    g.orig_spacing = parse_sp("orig_spacing");
    g.crop_y0 = static_cast<int>(kv.get_int("crop_y0", 0));
    g.crop_x0 = static_cast<int>(kv.get_int("crop_x0", 0));
    g.cropped_dims = parse_dims("cropped_dims");
    g.final_dims = parse_dims("final_dims");
    g.final_spacing = parse_sp("final_spacing");
    return g;
}

LabelMap restore_to_original(const LabelMap& pred, const GeometryLog& geo) {
    if (pred.dims != geo.final_dims) {
        throw std::invalid_argument("restore_to_original: prediction dims do not match geometry");
    }
    LabelMap on_crop = resample_labels_to(pred, geo.cropped_dims, geo.orig_spacing);
    LabelMap out = LabelMap::filled(geo.orig_dims, geo.orig_spacing, 0);
    for (int z = 0; z < geo.cropped_dims[0]; ++z) {
        for (int y = 0; y < geo.cropped_dims[1]; ++y) {
            for (int x = 0; x < geo.cropped_dims[2]; ++x) {
                out.at(z, y + geo.crop_y0, x + geo.crop_x0) = on_crop.at(z, y, x);
            }
        }
    }
    return out;
}

}  // namespace dfseg
