#include "dfseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace dfseg {

namespace {

struct Ellipsoid {
    double cz, cy, cx;
    double rz, ry, rx;

    bool contains(int z, int y, int x) const {
        double dz = (z - cz) / rz, dy = (y - cy) / ry, dx = (x - cx) / rx;
        return dz * dz + dy * dy + dx * dx <= 1.0;
    }
};

struct Lesion {
    Ellipsoid shape;
    std::uint8_t cls;  // 1 = GTVp, 2 = GTVn
};

void paint(Volume& img, LabelMap& lab, const std::vector<Lesion>& lesions, double offset_p,
           double offset_n) {
    const int Z = img.dims[0], Y = img.dims[1], X = img.dims[2];
    for (const auto& l : lesions) {
        int z0 = std::max(0, static_cast<int>(l.shape.cz - l.shape.rz - 1));
        int z1 = std::min(Z - 1, static_cast<int>(l.shape.cz + l.shape.rz + 1));
        int y0 = std::max(0, static_cast<int>(l.shape.cy - l.shape.ry - 1));
        int y1 = std::min(Y - 1, static_cast<int>(l.shape.cy + l.shape.ry + 1));
        int x0 = std::max(0, static_cast<int>(l.shape.cx - l.shape.rx - 1));
        int x1 = std::min(X - 1, static_cast<int>(l.shape.cx + l.shape.rx + 1));
        double off = l.cls == 1 ? offset_p : offset_n;
        for (int z = z0; z <= z1; ++z) {
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    if (!l.shape.contains(z, y, x)) continue;
                    img.at(z, y, x) += static_cast<float>(off);
                    lab.at(z, y, x) = l.cls;
                }
            }
        }
    }
}

}  // namespace

PhantomCase gen_phantom_case(Rng rng, Dims3 dims, Spacing3 spacing, const std::string& task,
                             const std::string& id) {
    for (int d : dims) {
        if (d < 16) throw std::invalid_argument("phantom: dims must be at least 16 per axis");
    }
    if (task != "task1" && task != "task2") {
        throw std::invalid_argument("phantom: task must be task1 or task2");
    }
    PhantomCase c;
    c.id = id;

    const int Z = dims[0], Y = dims[1], X = dims[2];
    Ellipsoid body{
        Z * rng.uniform(0.48, 0.52), Y * rng.uniform(0.48, 0.52), X * rng.uniform(0.48, 0.52),
        Z * rng.uniform(0.34, 0.42), Y * rng.uniform(0.34, 0.42), X * rng.uniform(0.34, 0.42)};

    // lesions sit well inside the body
    int n_p = 1 + static_cast<int>(rng.uniform_index(2));  // 1..2
    int n_n = static_cast<int>(rng.uniform_index(4));      // 0..3
    std::vector<Lesion> lesions;
    for (int k = 0; k < n_p + n_n; ++k) {
        std::uint8_t cls = k < n_p ? 1 : 2;
        double scale = cls == 1 ? rng.uniform(0.10, 0.16) : rng.uniform(0.06, 0.10);
        for (int attempt = 0; attempt < 40; ++attempt) {
            double az = rng.uniform(-0.55, 0.55), ay = rng.uniform(-0.55, 0.55),
                   ax = rng.uniform(-0.55, 0.55);
            Ellipsoid e{body.cz + az * body.rz, body.cy + ay * body.ry, body.cx + ax * body.rx,
                        std::max(1.5, scale * Z), std::max(2.0, scale * Y),
                        std::max(2.0, scale * X)};
            bool clash = false;
            for (const auto& other : lesions) {
                double dz = (e.cz - other.shape.cz) / (e.rz + other.shape.rz);
                double dy = (e.cy - other.shape.cy) / (e.ry + other.shape.ry);
                double dx = (e.cx - other.shape.cx) / (e.rx + other.shape.rx);
                if (dz * dz + dy * dy + dx * dx < 1.2) {
                    clash = true;
                    break;
                }
            }
            if (!clash) {
                lesions.push_back({e, cls});
                break;
            }
        }
    }

    auto render_base = [&](double noise_sigma) {
        Volume img = Volume::filled(dims, spacing, 0.0f);
        for (int z = 0; z < Z; ++z) {
            for (int y = 0; y < Y; ++y) {
                for (int x = 0; x < X; ++x) {
                    double base = body.contains(z, y, x) ? 100.0 : 2.0;
                    double noisy = base + rng.normal(0.0, noise_sigma);
                    // background stays far below the body threshold
                    if (base < 50.0) noisy = std::clamp(noisy, 0.0, 8.0);
                    img.at(z, y, x) = static_cast<float>(noisy);
                }
            }
        }
        return img;
    };

    c.pre = render_base(3.0);
    c.pre_label = LabelMap::filled(dims, spacing, 0);
    paint(c.pre, c.pre_label, lesions, 40.0, 26.0);

    if (task == "task2") {
        // follow-up: same body, shrunk & jittered lesions, weaker contrast
        std::vector<Lesion> mid_lesions;
        for (const auto& l : lesions) {
            double s = rng.uniform(0.60, 0.85);
            Ellipsoid e = l.shape;
            e.cz += rng.uniform(-1.0, 1.0);
            e.cy += rng.uniform(-1.5, 1.5);
            e.cx += rng.uniform(-1.5, 1.5);
            e.rz = std::max(1.2, e.rz * s);
            e.ry = std::max(1.5, e.ry * s);
            e.rx = std::max(1.5, e.rx * s);
            mid_lesions.push_back({e, l.cls});
        }
        c.mid = render_base(3.0);
        c.mid_label = LabelMap::filled(dims, spacing, 0);
        paint(c.mid, c.mid_label, mid_lesions, 10.0, 8.0);
    }
    return c;
}

std::vector<std::string> phantom_gen(std::uint64_t seed, int n_cases, Dims3 dims,
                                     const std::string& task, const std::string& out_dir,
                                     Spacing3 spacing) {
    if (n_cases < 1) throw std::invalid_argument("phantom_gen: need at least one case");
    Rng root(seed);
    std::vector<std::string> out;
    for (int i = 0; i < n_cases; ++i) {
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "case_%03d", i);
        auto c = gen_phantom_case(root.fork(static_cast<std::uint64_t>(i)), dims, spacing, task,
                                  idbuf);
        std::string dir = out_dir + "/" + idbuf;
        std::filesystem::create_directories(dir);
        if (task == "task1") {
            write_volume(dir + "/preRT.dfsv", c.pre);
            write_labels(dir + "/label.dfsv", c.pre_label);
        } else {
            write_volume(dir + "/midRT.dfsv", c.mid);
            write_volume(dir + "/preRT_reg.dfsv", c.pre);
            write_labels(dir + "/preRT_reg_mask.dfsv", c.pre_label);
            write_labels(dir + "/label.dfsv", c.mid_label);
        }
        out.push_back(dir);
    }
    return out;
}

}  // namespace dfseg
