#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "dfseg/phantom.hpp"
#include "dfseg/preprocess.hpp"
#include "dfseg/rng.hpp"
#include "dfseg/volume.hpp"

using namespace dfseg;

namespace {

namespace fs = std::filesystem;

std::string tmp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("dfseg_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

Volume random_volume(Dims3 dims, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Volume v = Volume::filled(dims, {1.0, 1.0, 1.0}, 0);
    for (auto& x : v.vox) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

double ks_distance(std::vector<float> a, std::vector<float> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double ks = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j]) {
            ++i;
        } else {
            ++j;
        }
        double fa = static_cast<double>(i) / a.size();
        double fb = static_cast<double>(j) / b.size();
        ks = std::max(ks, std::abs(fa - fb));
    }
    return ks;
}

}  // namespace

TEST_CASE("volume file round-trip is bit-identical") {
    Rng rng(1);
    std::string dir = tmp_dir("vio");
    for (int trial = 0; trial < 5; ++trial) {
        Volume v = random_volume({5, 6, 7}, rng, -100, 300);
        v.spacing = {1.2, 0.5, 0.5};
        std::string p = dir + "/v" + std::to_string(trial) + ".dfsv";
        write_volume(p, v);
        Volume back = read_volume(p);
        CHECK(back.dims == v.dims);
        CHECK(back.spacing == v.spacing);
        CHECK(back.vox == v.vox);
        // write(read(file)) reproduces the bytes
        std::string p2 = dir + "/v" + std::to_string(trial) + "b.dfsv";
        write_volume(p2, back);
        CHECK(read_file_bytes(p) == read_file_bytes(p2));
    }
    LabelMap m = LabelMap::filled({4, 5, 6}, {2, 1, 1}, 0);
    for (auto& x : m.vox) x = static_cast<std::uint8_t>(rng.uniform_index(3));
    write_labels(dir + "/m.dfsv", m);
    CHECK(read_labels(dir + "/m.dfsv").vox == m.vox);
}

TEST_CASE("malformed volume files are rejected before payload reads") {
    std::string dir = tmp_dir("vbad");
    Volume v = Volume::filled({4, 4, 4}, {1, 1, 1}, 1.0f);
    std::string good = dir + "/good.dfsv";
    write_volume(good, v);
    auto bytes = read_file_bytes(good);

    auto expect_rejected = [&](std::vector<std::uint8_t> mutated, const std::string& name) {
        std::string p = dir + "/" + name;
        write_file_bytes(p, mutated);
        CHECK_THROWS_AS(read_volume_file(p), std::runtime_error);
    };

    auto wrong_magic = bytes;
    wrong_magic[0] = 'X';
    expect_rejected(wrong_magic, "magic.dfsv");

    auto wrong_version = bytes;
    wrong_version[4] = 9;
    expect_rejected(wrong_version, "version.dfsv");

    auto wrong_dtype = bytes;
    wrong_dtype[6] = 7;
    expect_rejected(wrong_dtype, "dtype.dfsv");

    auto truncated = bytes;
    truncated.resize(truncated.size() - 5);
    expect_rejected(truncated, "trunc.dfsv");

    // type confusion is also rejected
    CHECK_THROWS_AS(read_labels(good), std::runtime_error);
}

TEST_CASE("26-connectivity labeling counts components and sizes") {
    Dims3 dims{4, 4, 4};
    std::vector<std::uint8_t> mask(64, 0);
    // two diagonal voxels touch at a corner: one 26-connected component
    mask[(0 * 4 + 0) * 4 + 0] = 1;
    mask[(1 * 4 + 1) * 4 + 1] = 1;
    std::vector<std::int64_t> sizes;
    connected_components_26(mask, dims, sizes);
    CHECK(sizes.size() == 1);
    CHECK(sizes[0] == 2);

    mask[(3 * 4 + 3) * 4 + 3] = 1;  // more than one voxel away on every axis
    connected_components_26(mask, dims, sizes);
    CHECK(sizes.size() == 2);
}

TEST_CASE("largest_component keeps the 1000-voxel blob, drops the 10-voxel one") {
    Dims3 dims{20, 20, 20};
    std::vector<std::uint8_t> mask(8000, 0);
    auto idx = [&](int z, int y, int x) { return (z * 20 + y) * 20 + x; };
    for (int z = 0; z < 10; ++z) {
        for (int y = 0; y < 10; ++y) {
            for (int x = 0; x < 10; ++x) mask[idx(z, y, x)] = 1;
        }
    }
    for (int x = 0; x < 10; ++x) mask[idx(15, 15, x)] = 1;  // small stripe, disconnected
    auto out = largest_component(mask, dims);
    std::int64_t n = 0;
    for (auto v : out) n += v;
    CHECK(n == 1000);
    CHECK(out[idx(15, 15, 3)] == 0);
}

TEST_CASE("hole filling closes interior cavities only") {
    Dims3 dims{8, 8, 8};
    std::vector<std::uint8_t> mask(512, 0);
    auto idx = [&](int z, int y, int x) { return (z * 8 + y) * 8 + x; };
    for (int z = 1; z < 7; ++z) {
        for (int y = 1; y < 7; ++y) {
            for (int x = 1; x < 7; ++x) mask[idx(z, y, x)] = 1;
        }
    }
    mask[idx(3, 3, 3)] = 0;  // cavity
    fill_holes(mask, dims);
    CHECK(mask[idx(3, 3, 3)] == 1);
    CHECK(mask[idx(0, 0, 0)] == 0);  // outside stays background
}

TEST_CASE("body_mask recovers a bright ellipsoid and keeps one component") {
    Dims3 dims{24, 24, 24};
    Volume v = Volume::filled(dims, {1, 1, 1}, 1.0f);
    auto inside = [&](int z, int y, int x) {
        double dz = (z - 12.0) / 8.0, dy = (y - 12.0) / 9.0, dx = (x - 12.0) / 7.0;
        return dz * dz + dy * dy + dx * dx <= 1.0;
    };
    std::int64_t truth = 0;
    for (int z = 0; z < 24; ++z) {
        for (int y = 0; y < 24; ++y) {
            for (int x = 0; x < 24; ++x) {
                if (inside(z, y, x)) {
                    v.at(z, y, x) = 100.0f;
                    ++truth;
                }
            }
        }
    }
    BodyMask m = body_mask(v, 60.0, 3);
    std::int64_t inter = 0, uni = 0;
    for (int z = 0; z < 24; ++z) {
        for (int y = 0; y < 24; ++y) {
            for (int x = 0; x < 24; ++x) {
                bool a = inside(z, y, x);
                bool b = m.vox[(z * 24 + y) * 24 + x] != 0;
                inter += a && b;
                uni += a || b;
            }
        }
    }
    CHECK(static_cast<double>(inter) / uni > 0.99);
    std::vector<std::int64_t> sizes;
    connected_components_26(m.vox, dims, sizes);
    CHECK(sizes.size() == 1);
    CHECK(truth > 0);
}

TEST_CASE("body_mask keeps only the dominant component and rejects empty scans") {
    Dims3 dims{20, 20, 20};
    Volume v = Volume::filled(dims, {1, 1, 1}, 0.0f);
    for (int z = 2; z < 12; ++z) {
        for (int y = 2; y < 12; ++y) {
            for (int x = 2; x < 12; ++x) v.at(z, y, x) = 100.0f;
        }
    }
    for (int x = 0; x < 10; ++x) v.at(17, 17, x) = 100.0f;  // 10-voxel distractor
    BodyMask m = body_mask(v, 60.0, 1);
    CHECK(m.vox[(17 * 20 + 17) * 20 + 3] == 0);
    CHECK(m.count() >= 1000);

    Volume dark = Volume::filled(dims, {1, 1, 1}, 0.0f);
    CHECK_THROWS_AS(body_mask(dark, 60.0, 3), std::runtime_error);
}

TEST_CASE("crop_to_mask crops y/x only and restores through the geometry log") {
    Dims3 dims{32, 32, 32};
    Volume v = Volume::filled(dims, {1, 1, 1}, 0.0f);
    // centered bright 10x10 box in (y, x), full z extent
    for (int z = 0; z < 32; ++z) {
        for (int y = 11; y < 21; ++y) {
            for (int x = 11; x < 21; ++x) v.at(z, y, x) = 100.0f;
        }
    }
    BodyMask m = body_mask(v, 60.0, 0);
    Volume cropped = crop_to_mask(v, m);
    CHECK(cropped.dims == Dims3{32, 10, 10});

    // identity crop when the mask covers everything
    Volume all = Volume::filled({8, 9, 10}, {1, 1, 1}, 100.0f);
    BodyMask whole = body_mask(all, 60.0, 0);
    CHECK(crop_to_mask(all, whole).dims == Dims3{8, 9, 10});

    // round trip: a prediction on the cropped grid maps back to original voxels
    GeometryLog geo;
    geo.orig_dims = dims;
    geo.orig_spacing = {1, 1, 1};
    geo.crop_y0 = m.y0;
    geo.crop_x0 = m.x0;
    geo.cropped_dims = cropped.dims;
    geo.final_dims = cropped.dims;  // no resampling in this test
    geo.final_spacing = {1, 1, 1};
    LabelMap pred = LabelMap::filled(cropped.dims, {1, 1, 1}, 0);
    pred.at(5, 0, 0) = 1;
    pred.at(7, 9, 9) = 2;
    LabelMap restored = restore_to_original(pred, geo);
    CHECK(restored.dims == dims);
    CHECK(restored.at(5, 11, 11) == 1);
    CHECK(restored.at(7, 20, 20) == 2);
    std::int64_t nonzero = 0;
    for (auto x : restored.vox) nonzero += x != 0;
    CHECK(nonzero == 2);

    // geometry log round-trips through its kv form
    GeometryLog geo2 = GeometryLog::from_kv(geo.to_kv());
    CHECK(geo2.to_kv().canonical() == geo.to_kv().canonical());
}

TEST_CASE("match_histogram: identity fixed point within one bin width") {
    Rng rng(2);
    Volume v = random_volume({24, 24, 24}, rng, 10.0, 50.0);
    const int bins = 1024;
    Volume out = match_histogram(v, v, bins);
    double bin_w = (50.0 - 10.0) / bins;  // upper bound on the value range width
    for (std::size_t i = 0; i < v.vox.size(); ++i) {
        CHECK(std::abs(out.vox[i] - v.vox[i]) <= 2.0 * bin_w);
    }
}

TEST_CASE("match_histogram maps uniform [0,1] onto uniform [10,20] affinely") {
    Rng rng(3);
    Volume src = random_volume({64, 64, 64}, rng, 0.0, 1.0);
    Volume ref = random_volume({64, 64, 64}, rng, 10.0, 20.0);
    const int bins = 1024;
    Volume out = match_histogram(src, ref, bins);
    double max_err = 0.0;
    for (std::size_t i = 0; i < src.vox.size(); ++i) {
        double expect = 10.0 + 10.0 * src.vox[i];
        max_err = std::max(max_err, std::abs(out.vox[i] - expect));
    }
    CHECK(max_err < 10.0 * (1.0 / bins) * 10.0);  // within a few ref bins
}

TEST_CASE("match_histogram: KS distance below 2/bins on continuous volumes") {
    Rng rng(4);
    const int bins = 1024;
    Volume src = random_volume({64, 64, 64}, rng, -3.0, 5.0);
    Volume ref = random_volume({64, 64, 64}, rng, 100.0, 140.0);
    Volume out = match_histogram(src, ref, bins);
    CHECK(ks_distance(out.vox, ref.vox) < 2.0 / bins);
}

TEST_CASE("match_histogram preserves rank order") {
    Rng rng(5);
    Volume src = random_volume({16, 16, 16}, rng, 0.0, 1.0);
    Volume ref = random_volume({16, 16, 16}, rng, 0.0, 1.0);
    for (auto& x : ref.vox) x = x * x;  // non-uniform reference
    Volume out = match_histogram(src, ref, 256);
    std::vector<std::size_t> order(src.vox.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return src.vox[a] < src.vox[b]; });
    for (std::size_t k = 1; k < order.size(); ++k) {
        CHECK(out.vox[order[k]] >= out.vox[order[k - 1]] - 1e-6f);
    }
}

TEST_CASE("match_histogram degenerate inputs") {
    Rng rng(6);
    Volume ref = random_volume({8, 8, 8}, rng, 0.0, 1.0);
    Volume flat = Volume::filled({8, 8, 8}, {1, 1, 1}, 3.0f);
    Volume out = match_histogram(flat, ref, 128);
    for (std::size_t i = 1; i < out.vox.size(); ++i) CHECK(out.vox[i] == out.vox[0]);
    CHECK_THROWS_AS(match_histogram(ref, flat, 128), std::runtime_error);
}

TEST_CASE("resample: identical spacing is a bitwise identity") {
    Rng rng(7);
    Volume v = random_volume({10, 12, 14}, rng, -5, 5);
    v.spacing = {1.2, 0.5, 0.5};
    Volume out = resample_image(v, {1.2, 0.5, 0.5});
    CHECK(out.dims == v.dims);
    CHECK(out.vox == v.vox);
}

TEST_CASE("resample: halving the spacing doubles the dims") {
    Volume v = Volume::filled({10, 12, 14}, {2.0, 2.0, 2.0}, 1.0f);
    Volume out = resample_image(v, {1.0, 1.0, 1.0});
    CHECK(out.dims == Dims3{20, 24, 28});
    LabelMap m = LabelMap::filled({10, 12, 14}, {2.0, 2.0, 2.0}, 2);
    CHECK(resample_labels(m, {1.0, 1.0, 1.0}).dims == Dims3{20, 24, 28});
}

TEST_CASE("resample: trilinear interpolation is exact on a linear ramp (interior)") {
    Dims3 dims{16, 16, 16};
    Volume v = Volume::filled(dims, {2, 2, 2}, 0);
    auto ramp = [](double z, double y, double x) { return 0.5 * z + 1.25 * y - 0.75 * x + 2.0; };
    for (int z = 0; z < 16; ++z) {
        for (int y = 0; y < 16; ++y) {
            for (int x = 0; x < 16; ++x) v.at(z, y, x) = static_cast<float>(ramp(z, y, x));
        }
    }
    Volume out = resample_image(v, {1, 1, 1});
    CHECK(out.dims == Dims3{32, 32, 32});
    const double f = 16.0 / 32.0;
    for (int z = 2; z < 30; ++z) {
        for (int y = 2; y < 30; ++y) {
            for (int x = 2; x < 30; ++x) {
                double sz = (z + 0.5) * f - 0.5;
                double sy = (y + 0.5) * f - 0.5;
                double sx = (x + 0.5) * f - 0.5;
                CHECK(std::abs(out.at(z, y, x) - ramp(sz, sy, sx)) < 1e-4);
            }
        }
    }
    CHECK_THROWS_AS(resample_image(v, {0.0, 1.0, 1.0}), std::invalid_argument);
}

TEST_CASE("zscore normalizes, is affine-invariant, and honors the mask") {
    Rng rng(8);
    Volume v = random_volume({12, 12, 12}, rng, 50.0, 150.0);
    Volume z = zscore(v);
    double s = 0.0, ss = 0.0;
    for (float x : z.vox) {
        s += x;
        ss += static_cast<double>(x) * x;
    }
    double mean = s / z.vox.size();
    double std = std::sqrt(ss / z.vox.size() - mean * mean);
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(std - 1.0) < 1e-5);

    Volume affine = v;
    for (auto& x : affine.vox) x = 3.0f * x + 17.0f;
    Volume z2 = zscore(affine);
    for (std::size_t i = 0; i < z.vox.size(); ++i) {
        CHECK(z2.vox[i] == doctest::Approx(z.vox[i]).epsilon(1e-4));
    }

    // bright background outside the mask shifts the unmasked variant
    Volume bright = v;
    BodyMask m;
    m.dims = v.dims;
    m.vox.assign(v.vox.size(), 0);
    for (int z0 = 4; z0 < 8; ++z0) {
        for (int y = 4; y < 8; ++y) {
            for (int x = 4; x < 8; ++x) {
                m.vox[(z0 * 12 + y) * 12 + x] = 1;
            }
        }
    }
    m.y0 = m.x0 = m.z0 = 4;
    m.y1 = m.x1 = m.z1 = 7;
    for (int z0 = 0; z0 < 2; ++z0) {
        for (int y = 0; y < 12; ++y) {
            for (int x = 0; x < 12; ++x) bright.at(z0, y, x) = 5000.0f;
        }
    }
    Volume masked = zscore(bright, &m);
    Volume unmasked = zscore(bright);
    double diff = 0.0;
    for (std::size_t i = 0; i < masked.vox.size(); ++i) {
        diff += std::abs(masked.vox[i] - unmasked.vox[i]);
    }
    CHECK(diff > 1.0);

    Volume flat = Volume::filled({4, 4, 4}, {1, 1, 1}, 3.0f);
    CHECK_THROWS_AS(zscore(flat), std::runtime_error);
}

TEST_CASE("phantom generation is deterministic and preprocessable") {
    std::string d1 = tmp_dir("ph1");
    std::string d2 = tmp_dir("ph2");
    phantom_gen(99, 3, {20, 40, 40}, "task2", d1);
    phantom_gen(99, 3, {20, 40, 40}, "task2", d2);
    for (const auto& name : {"case_000", "case_001", "case_002"}) {
        for (const auto& file :
             {"midRT.dfsv", "preRT_reg.dfsv", "preRT_reg_mask.dfsv", "label.dfsv"}) {
            CHECK(read_file_bytes(d1 + "/" + name + "/" + file) ==
                  read_file_bytes(d2 + "/" + name + "/" + file));
        }
    }

    for (const auto& name : {"case_000", "case_001", "case_002"}) {
        Volume v = read_volume(d1 + "/" + name + "/midRT.dfsv");
        BodyMask m = body_mask(v, 60.0, 3);
        std::vector<std::int64_t> sizes;
        connected_components_26(m.vox, m.dims, sizes);
        CHECK(sizes.size() == 1);

        // constructed ground truth has at least one primary-tumor voxel
        LabelMap lab = read_labels(d1 + "/" + name + "/label.dfsv");
        std::int64_t p = 0;
        for (auto x : lab.vox) p += x == 1;
        CHECK(p > 0);
    }

    // task1 layout
    std::string d3 = tmp_dir("ph3");
    phantom_gen(5, 1, {16, 32, 32}, "task1", d3);
    CHECK(fs::exists(d3 + "/case_000/preRT.dfsv"));
    CHECK(fs::exists(d3 + "/case_000/label.dfsv"));
    CHECK_FALSE(fs::exists(d3 + "/case_000/midRT.dfsv"));
}
