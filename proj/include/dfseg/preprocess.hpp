#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dfseg/util.hpp"
#include "dfseg/volume.hpp"

namespace dfseg {

// Binary body mask with a tight bounding box; exactly one 26-connected
// component by construction.
struct BodyMask {
    Dims3 dims{0, 0, 0};
    std::vector<std::uint8_t> vox;
    int z0 = 0, z1 = -1, y0 = 0, y1 = -1, x0 = 0, x1 = -1;  // inclusive

    std::int64_t count() const;
};

// 26-connectivity labeling; labels start at 1, 0 is background.
// component_sizes[k] is the voxel count of label k+1.
std::vector<std::int32_t> connected_components_26(const std::vector<std::uint8_t>& mask,
                                                  Dims3 dims,
                                                  std::vector<std::int64_t>& component_sizes);

std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, Dims3 dims);

// closing = dilation then erosion with a ball structuring element
void morph_close_ball(std::vector<std::uint8_t>& mask, Dims3 dims, int radius);

// fills cavities not reachable from the border through the background
void fill_holes(std::vector<std::uint8_t>& mask, Dims3 dims);

// threshold -> largest component -> closing -> hole fill; throws when no
// voxel exceeds the threshold.
BodyMask body_mask(const Volume& v, double threshold, int close_radius = 3);

// Crop on y/x to the mask bounding box; z is preserved.
Volume crop_to_mask(const Volume& v, const BodyMask& m);
LabelMap crop_to_mask(const LabelMap& v, const BodyMask& m);
BodyMask crop_mask(const BodyMask& m);

// Classic CDF matching with per-bin linear interpolation; the mapping is
// non-decreasing and the matched empirical CDF tracks the reference within
// the bin resolution. Constant reference is an error; a constant source maps
// every voxel to the reference median.
Volume match_histogram(const Volume& source, const Volume& reference, int bins = 1024);

// dims' = round(dims * spacing / target); trilinear for images, nearest for
// labels, voxel-center alignment with border clamp.
Volume resample_image(const Volume& v, Spacing3 target_spacing);
LabelMap resample_labels(const LabelMap& m, Spacing3 target_spacing);
LabelMap resample_labels_to(const LabelMap& m, Dims3 target_dims, Spacing3 target_spacing);
BodyMask resample_mask_to(const BodyMask& m, Dims3 target_dims);

// (x - mean) / std over the mask region when given (all voxels otherwise),
// applied everywhere; zero std is an error.
Volume zscore(const Volume& v, const BodyMask* mask = nullptr);

// Everything needed to map a prediction on the preprocessed grid back onto
// the original voxel grid.
struct GeometryLog {
    Dims3 orig_dims{0, 0, 0};
    Spacing3 orig_spacing{1, 1, 1};
    int crop_y0 = 0, crop_x0 = 0;
    Dims3 cropped_dims{0, 0, 0};
    Dims3 final_dims{0, 0, 0};
    Spacing3 final_spacing{1, 1, 1};

    KvConfig to_kv() const;
    static GeometryLog from_kv(const KvConfig& kv);
};

LabelMap restore_to_original(const LabelMap& pred, const GeometryLog& geo);

}  // namespace dfseg
