#include "dfseg/volume.hpp"

#include <stdexcept>

namespace dfseg {

namespace {

constexpr char kMagic[4] = {'D', 'F', 'S', 'V'};
constexpr std::uint16_t kVersion = 1;

void write_header(std::vector<std::uint8_t>& out, VoxType type, Dims3 dims, Spacing3 spacing) {
    out.insert(out.end(), kMagic, kMagic + 4);
    store_le<std::uint16_t>(out, kVersion);
    store_le<std::uint8_t>(out, static_cast<std::uint8_t>(type));
    for (int d : dims) {
        if (d <= 0) throw std::invalid_argument("volume write: dims must be positive");
        store_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    }
    for (double s : spacing) {
        if (!(s > 0.0)) throw std::invalid_argument("volume write: spacing must be positive");
        store_le<double>(out, s);
    }
}

}  // namespace

Volume Volume::filled(Dims3 dims, Spacing3 spacing, float value) {
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    v.vox.assign(static_cast<std::size_t>(voxel_count(dims)), value);
    return v;
}

LabelMap LabelMap::filled(Dims3 dims, Spacing3 spacing, std::uint8_t value) {
    LabelMap m;
    m.dims = dims;
    m.spacing = spacing;
    m.vox.assign(static_cast<std::size_t>(voxel_count(dims)), value);
    return m;
}

void write_volume(const std::string& path, const Volume& v) {
    if (static_cast<std::int64_t>(v.vox.size()) != v.size()) {
        throw std::invalid_argument("volume write: voxel count does not match dims");
    }
    std::vector<std::uint8_t> out;
    out.reserve(39 + v.vox.size() * 4);
    write_header(out, VoxType::f32, v.dims, v.spacing);
    for (float f : v.vox) store_le<float>(out, f);
    write_file_bytes(path, out);
}

void write_labels(const std::string& path, const LabelMap& m) {
    if (static_cast<std::int64_t>(m.vox.size()) != m.size()) {
        throw std::invalid_argument("volume write: voxel count does not match dims");
    }
    std::vector<std::uint8_t> out;
    out.reserve(39 + m.vox.size());
    write_header(out, VoxType::u8, m.dims, m.spacing);
    out.insert(out.end(), m.vox.begin(), m.vox.end());
    write_file_bytes(path, out);
}

VolumeFileData read_volume_file(const std::string& path) {
    auto bytes = read_file_bytes(path);
    // header: magic(4) version(2) dtype(1) dims(12) spacing(24)
    if (bytes.size() < 43) throw std::runtime_error("volume '" + path + "': truncated header");
    const std::uint8_t* p = bytes.data();
    if (std::memcmp(p, kMagic, 4) != 0) {
        throw std::runtime_error("volume '" + path + "': bad magic (not a DFSV file)");
    }
    p += 4;
    std::uint16_t version = load_le<std::uint16_t>(p);
    p += 2;
    if (version != kVersion) {
        throw std::runtime_error("volume '" + path + "': unsupported format version " +
                                 std::to_string(version));
    }
    std::uint8_t dtype = *p++;
    if (dtype > 1) {
        throw std::runtime_error("volume '" + path + "': unknown dtype tag " +
                                 std::to_string(dtype));
    }
    VolumeFileData data;
    data.type = static_cast<VoxType>(dtype);
    for (auto& d : data.dims) {
        std::uint32_t raw = load_le<std::uint32_t>(p);
        p += 4;
        if (raw == 0 || raw > (1u << 24)) {
            throw std::runtime_error("volume '" + path + "': implausible dims");
        }
        d = static_cast<int>(raw);
    }
    for (auto& s : data.spacing) {
        s = load_le<double>(p);
        p += 8;
        if (!(s > 0.0)) throw std::runtime_error("volume '" + path + "': nonpositive spacing");
    }
    std::size_t n = static_cast<std::size_t>(voxel_count(data.dims));
    std::size_t want = data.type == VoxType::f32 ? n * 4 : n;
    std::size_t have = bytes.size() - 43;
    if (have != want) {
        throw std::runtime_error("volume '" + path + "': payload is " + std::to_string(have) +
                                 " bytes, expected " + std::to_string(want));
    }
    if (data.type == VoxType::f32) {
        data.f32.resize(n);
        for (auto& f : data.f32) {
            f = load_le<float>(p);
            p += 4;
        }
    } else {
        data.u8.assign(p, p + n);
    }
    return data;
}

Volume VolumeFileData::to_volume() const {
    if (type != VoxType::f32) throw std::runtime_error("expected an f32 volume, found labels");
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    v.vox = f32;
    return v;
}

LabelMap VolumeFileData::to_labels() const {
    if (type != VoxType::u8) throw std::runtime_error("expected a u8 label map, found f32 data");
    LabelMap m;
    m.dims = dims;
    m.spacing = spacing;
    m.vox = u8;
    return m;
}

Volume read_volume(const std::string& path) { return read_volume_file(path).to_volume(); }

LabelMap read_labels(const std::string& path) { return read_volume_file(path).to_labels(); }

}  // namespace dfseg
