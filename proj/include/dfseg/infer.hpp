#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dfseg/augment.hpp"
#include "dfseg/model.hpp"
#include "dfseg/volume.hpp"

namespace dfseg {

// Class probabilities on a volume grid, planes per class; per-voxel channel
// sums stay within 1e-5 of 1.
struct ProbMap {
    Dims3 dims{0, 0, 0};
    int num_classes = 0;
    std::vector<float> prob;  // [num_classes, voxels]

    float at(int cls, std::int64_t voxel) const {
        return prob[static_cast<std::int64_t>(cls) * voxel_count(dims) + voxel];
    }
};

// Window origins along one axis: multiples of patch*(1-overlap), plus a final
// window flush with the boundary.
std::vector<int> window_origins(int length, int patch, double overlap);

// Separable center-weight map, sigma = patch/8 per axis.
std::vector<float> gaussian_weights(Dims3 patch);

// Gaussian-weighted accumulation of per-window softmax over the stacked
// channels; volumes shorter than the patch are zero-padded at the high end.
ProbMap sliding_window(const Model& model, const std::vector<const Volume*>& channels,
                       Dims3 patch, double overlap = 0.5);

const std::vector<FlipAxes>& all_flips();  // the 8 axis combinations

// Average of inverse-flipped predictions over the set; empty set is an error.
ProbMap tta_flips(const Model& model, const std::vector<const Volume*>& channels, Dims3 patch,
                  double overlap, const std::vector<FlipAxes>& flip_set);

// Voxelwise mean of probabilities then argmax; ties break to the lowest
// class index.
LabelMap ensemble(const std::vector<const ProbMap*>& maps, Spacing3 spacing);

struct EvalReport {
    struct CaseEntry {
        std::string id;
        std::vector<double> dsc;  // foreground classes 1..C-1
    };
    std::vector<CaseEntry> cases;
    std::vector<double> aggregated;  // per foreground class, pooled over cases
    double mean_aggregated = 0.0;
};

// Pooled Dice: per class, sum intersections and sizes over all cases before
// the ratio. A case with neither prediction nor reference voxels of a class
// contributes zeros to the pools and reports a per-case DSC of 1.
EvalReport aggregated_dsc(
    const std::vector<std::pair<const LabelMap*, const LabelMap*>>& pred_ref,
    const std::vector<std::string>& ids, int num_classes = 3);

std::string format_report(const EvalReport& report);
void write_report(const std::string& path, const EvalReport& report);

}  // namespace dfseg
