#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfseg/util.hpp"

namespace dfseg {

// 3D scalar image, row-major (z, y, x), voxel spacing in mm per axis.
struct Volume {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<float> vox;

    std::int64_t size() const { return voxel_count(dims); }
    float& at(int z, int y, int x) {
        return vox[(static_cast<std::int64_t>(z) * dims[1] + y) * dims[2] + x];
    }
    float at(int z, int y, int x) const {
        return vox[(static_cast<std::int64_t>(z) * dims[1] + y) * dims[2] + x];
    }
    static Volume filled(Dims3 dims, Spacing3 spacing, float value);
};

// Integer class map over {0: background, 1: GTVp, 2: GTVn}.
struct LabelMap {
    Dims3 dims{0, 0, 0};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<std::uint8_t> vox;

    std::int64_t size() const { return voxel_count(dims); }
    std::uint8_t& at(int z, int y, int x) {
        return vox[(static_cast<std::int64_t>(z) * dims[1] + y) * dims[2] + x];
    }
    std::uint8_t at(int z, int y, int x) const {
        return vox[(static_cast<std::int64_t>(z) * dims[1] + y) * dims[2] + x];
    }
    static LabelMap filled(Dims3 dims, Spacing3 spacing, std::uint8_t value);
};

// "DFSV" container: magic, u16 version, dtype tag (f32|u8), u32 dims (z,y,x),
// f64 spacing, little-endian row-major payload. Round-trips bit-exactly.
enum class VoxType : std::uint8_t { f32 = 0, u8 = 1 };

void write_volume(const std::string& path, const Volume& v);
void write_labels(const std::string& path, const LabelMap& m);

struct VolumeFileData {
    VoxType type;
    Dims3 dims;
    Spacing3 spacing;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    Volume to_volume() const;
    LabelMap to_labels() const;
};

VolumeFileData read_volume_file(const std::string& path);
Volume read_volume(const std::string& path);    // errors if the file holds labels
LabelMap read_labels(const std::string& path);  // errors if the file holds f32

}  // namespace dfseg
