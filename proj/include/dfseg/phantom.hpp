#pragma once

#include <string>
#include <vector>

#include "dfseg/rng.hpp"
#include "dfseg/util.hpp"
#include "dfseg/volume.hpp"

namespace dfseg {

// Synthetic stand-in for scan pairs: an ellipsoidal body (intensity ~100) on
// a dark background, with one or two primary-tumor blobs and up to three
// node blobs. The follow-up image keeps the body geometry but shrinks and
// jitters every lesion and lowers its contrast, so the baseline mask is an
// informative (not exact) prior.
struct PhantomCase {
    std::string id;
    Volume pre;
    LabelMap pre_label;
    Volume mid;        // task2 only
    LabelMap mid_label;
};

PhantomCase gen_phantom_case(Rng rng, Dims3 dims, Spacing3 spacing, const std::string& task,
                             const std::string& id);

// Writes <out>/<case_id>/ directories:
//   task1: preRT.dfsv, label.dfsv
//   task2: midRT.dfsv, preRT_reg.dfsv, preRT_reg_mask.dfsv, label.dfsv
// Deterministic per seed, byte for byte.
std::vector<std::string> phantom_gen(std::uint64_t seed, int n_cases, Dims3 dims,
                                     const std::string& task, const std::string& out_dir,
                                     Spacing3 spacing = {1.2, 0.5, 0.5});

}  // namespace dfseg
