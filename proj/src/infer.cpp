#include "dfseg/infer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "dfseg/kernels.hpp"

namespace dfseg {

std::vector<int> window_origins(int length, int patch, double overlap) {
    if (patch <= 0 || length < patch) {
        throw std::invalid_argument("window_origins: need length >= patch");
    }
    if (overlap < 0.0 || overlap >= 1.0) {
        throw std::invalid_argument("window_origins: overlap must be in [0,1)");
    }
    int stride = std::max(1, static_cast<int>(std::llround(patch * (1.0 - overlap))));
    std::vector<int> origins;
    for (int o = 0; o + patch <= length; o += stride) origins.push_back(o);
    if (origins.empty() || origins.back() != length - patch) {
        origins.push_back(length - patch);  // final window flush with the boundary
    }
    return origins;
}

std::vector<float> gaussian_weights(Dims3 patch) {
    std::array<std::vector<double>, 3> axis;
    for (int a = 0; a < 3; ++a) {
        double sigma = patch[a] / 8.0;
        double center = (patch[a] - 1) / 2.0;
        axis[a].resize(patch[a]);
        for (int i = 0; i < patch[a]; ++i) {
            double d = (i - center) / std::max(sigma, 1e-8);
            axis[a][i] = std::exp(-0.5 * d * d);
        }
    }
    std::vector<float> w(static_cast<std::size_t>(voxel_count(patch)));
    std::size_t o = 0;
    for (int z = 0; z < patch[0]; ++z) {
        for (int y = 0; y < patch[1]; ++y) {
            double zy = axis[0][z] * axis[1][y];
            for (int x = 0; x < patch[2]; ++x) {
                w[o++] = static_cast<float>(zy * axis[2][x]);
            }
        }
    }
    return w;
}

namespace {

// stacked channels -> [1, C, pz, py, px] tensor window at `origin` of the
// zero-padded volume
TensorPtr window_tensor(const std::vector<const Volume*>& channels, Dims3 vd, Dims3 patch,
                        Dims3 origin) {
    const int C = static_cast<int>(channels.size());
    auto t = Tensor::zeros({1, C, patch[0], patch[1], patch[2]});
    const std::int64_t pv = voxel_count(patch);
    for (int c = 0; c < C; ++c) {
        const Volume& v = *channels[c];
        double* dst = t->values.data() + static_cast<std::int64_t>(c) * pv;
        for (int z = 0; z < patch[0]; ++z) {
            int sz = origin[0] + z;
            if (sz >= vd[0]) break;
            for (int y = 0; y < patch[1]; ++y) {
                int sy = origin[1] + y;
                if (sy >= vd[1]) break;
                int nx = std::min(patch[2], vd[2] - origin[2]);
                const float* src =
                    v.vox.data() + (static_cast<std::int64_t>(sz) * vd[1] + sy) * vd[2] + origin[2];
                double* drow = dst + (static_cast<std::int64_t>(z) * patch[1] + y) * patch[2];
                for (int x = 0; x < nx; ++x) drow[x] = src[x];
            }
        }
    }
    return t;
}

void softmax_into(const TensorPtr& logits, std::vector<float>& out) {
    const int C = logits->shape[1];
    const std::int64_t V =
        static_cast<std::int64_t>(logits->shape[2]) * logits->shape[3] * logits->shape[4];
    out.resize(static_cast<std::size_t>(C) * V);
    const double* z = logits->values.data();
    for (std::int64_t v = 0; v < V; ++v) {
        double m = z[v];
        for (int c = 1; c < C; ++c) m = std::max(m, z[static_cast<std::int64_t>(c) * V + v]);
        double denom = 0.0;
        for (int c = 0; c < C; ++c) denom += std::exp(z[static_cast<std::int64_t>(c) * V + v] - m);
        double inv = 1.0 / denom;
        for (int c = 0; c < C; ++c) {
            out[static_cast<std::size_t>(c) * V + v] =
                static_cast<float>(std::exp(z[static_cast<std::int64_t>(c) * V + v] - m) * inv);
        }
    }
}

}  // namespace

ProbMap sliding_window(const Model& model, const std::vector<const Volume*>& channels,
                       Dims3 patch, double overlap) {
    if (channels.empty()) throw std::invalid_argument("sliding_window: no input channels");
    const Dims3 vd = channels[0]->dims;
    for (const Volume* v : channels) {
        if (v->dims != vd) throw std::invalid_argument("sliding_window: channel dims mismatch");
    }
    Dims3 padded;
    for (int a = 0; a < 3; ++a) padded[a] = std::max(vd[a], patch[a]);

    std::array<std::vector<int>, 3> origins;
    for (int a = 0; a < 3; ++a) origins[a] = window_origins(padded[a], patch[a], overlap);

    struct Window {
        Dims3 origin;
    };
    std::vector<Window> windows;
    for (int oz : origins[0]) {
        for (int oy : origins[1]) {
            for (int ox : origins[2]) windows.push_back({{oz, oy, ox}});
        }
    }

    const int C = model.config().num_classes;
    const std::int64_t pv = voxel_count(padded);
    const std::int64_t patchv = voxel_count(patch);
    std::vector<float> acc(static_cast<std::size_t>(C) * pv, 0.0f);
    std::vector<float> wsum(static_cast<std::size_t>(pv), 0.0f);
    std::vector<float> gw = gaussian_weights(patch);

    // Windows run in parallel; accumulation happens afterwards in window
    // order so the result is independent of scheduling.
    const std::size_t chunk = 8;
    std::vector<std::vector<float>> probs(std::min(chunk, windows.size()));
    for (std::size_t base = 0; base < windows.size(); base += chunk) {
        std::size_t count = std::min(chunk, windows.size() - base);
        parallel_for(static_cast<std::int64_t>(count), [&](std::int64_t k) {
            NoGradGuard ng;
            auto in = window_tensor(channels, vd, patch, windows[base + k].origin);
            auto logits = model.forward_any(in);
            softmax_into(logits[0], probs[static_cast<std::size_t>(k)]);
        });
        for (std::size_t k = 0; k < count; ++k) {
            const Dims3 o = windows[base + k].origin;
            const std::vector<float>& p = probs[k];
            for (int z = 0; z < patch[0]; ++z) {
                for (int y = 0; y < patch[1]; ++y) {
                    const std::int64_t prow =
                        (static_cast<std::int64_t>(z) * patch[1] + y) * patch[2];
                    const std::int64_t arow =
                        (static_cast<std::int64_t>(o[0] + z) * padded[1] + o[1] + y) * padded[2] +
                        o[2];
                    for (int x = 0; x < patch[2]; ++x) {
                        wsum[arow + x] += gw[prow + x];
                    }
                    for (int c = 0; c < C; ++c) {
                        kern::ops().fmadd_f(acc.data() + static_cast<std::int64_t>(c) * pv + arow,
                                            p.data() + static_cast<std::int64_t>(c) * patchv + prow,
                                            gw.data() + prow, static_cast<std::size_t>(patch[2]));
                    }
                }
            }
        }
    }

    ProbMap out;
    out.dims = vd;
    out.num_classes = C;
    const std::int64_t ov = voxel_count(vd);
    out.prob.resize(static_cast<std::size_t>(C) * ov);
    for (int c = 0; c < C; ++c) {
        for (int z = 0; z < vd[0]; ++z) {
            for (int y = 0; y < vd[1]; ++y) {
                for (int x = 0; x < vd[2]; ++x) {
                    std::int64_t src = (static_cast<std::int64_t>(z) * padded[1] + y) * padded[2] + x;
                    std::int64_t dst = (static_cast<std::int64_t>(z) * vd[1] + y) * vd[2] + x;
                    out.prob[static_cast<std::int64_t>(c) * ov + dst] =
                        acc[static_cast<std::int64_t>(c) * pv + src] / wsum[src];
                }
            }
        }
    }
    return out;
}

const std::vector<FlipAxes>& all_flips() {
    static const std::vector<FlipAxes> flips = [] {
        std::vector<FlipAxes> f;
        for (int m = 0; m < 8; ++m) {
            f.push_back({(m & 4) != 0, (m & 2) != 0, (m & 1) != 0});
        }
        return f;
    }();
    return flips;
}

ProbMap tta_flips(const Model& model, const std::vector<const Volume*>& channels, Dims3 patch,
                  double overlap, const std::vector<FlipAxes>& flip_set) {
    if (flip_set.empty()) throw std::invalid_argument("tta_flips: empty flip set");
    ProbMap out;
    for (std::size_t k = 0; k < flip_set.size(); ++k) {
        const FlipAxes f = flip_set[k];
        std::vector<Volume> flipped(channels.size());
        std::vector<const Volume*> ptrs(channels.size());
        for (std::size_t c = 0; c < channels.size(); ++c) {
            flipped[c].dims = channels[c]->dims;
            flipped[c].spacing = channels[c]->spacing;
            flipped[c].vox = flip_copy(channels[c]->vox, channels[c]->dims, f);
            ptrs[c] = &flipped[c];
        }
        ProbMap p = sliding_window(model, ptrs, patch, overlap);
        // flips are involutions, the same flip maps the prediction back
        const std::int64_t V = voxel_count(p.dims);
        for (int c = 0; c < p.num_classes; ++c) {
            std::vector<float> plane(p.prob.begin() + static_cast<std::int64_t>(c) * V,
                                     p.prob.begin() + static_cast<std::int64_t>(c + 1) * V);
            plane = flip_copy(plane, p.dims, f);
            std::copy(plane.begin(), plane.end(),
                      p.prob.begin() + static_cast<std::int64_t>(c) * V);
        }
        if (k == 0) {
            out = std::move(p);
        } else {
            for (std::size_t i = 0; i < out.prob.size(); ++i) out.prob[i] += p.prob[i];
        }
    }
    float inv = 1.0f / static_cast<float>(flip_set.size());
    for (auto& v : out.prob) v *= inv;
    return out;
}

LabelMap ensemble(const std::vector<const ProbMap*>& maps, Spacing3 spacing) {
    if (maps.empty()) throw std::invalid_argument("ensemble: no probability maps");
    const Dims3 dims = maps[0]->dims;
    const int C = maps[0]->num_classes;
    for (const ProbMap* m : maps) {
        if (m->dims != dims || m->num_classes != C) {
            throw std::invalid_argument("ensemble: probability map dims mismatch");
        }
    }
    const std::int64_t V = voxel_count(dims);
    LabelMap out = LabelMap::filled(dims, spacing, 0);
    const double inv = 1.0 / static_cast<double>(maps.size());
    for (std::int64_t v = 0; v < V; ++v) {
        double best = -1.0;
        int best_c = 0;
        for (int c = 0; c < C; ++c) {
            double mean = 0.0;
            for (const ProbMap* m : maps) mean += m->prob[static_cast<std::int64_t>(c) * V + v];
            mean *= inv;
            if (mean > best) {  // strict: ties keep the lowest class index
                best = mean;
                best_c = c;
            }
        }
        out.vox[v] = static_cast<std::uint8_t>(best_c);
    }
    return out;
}

EvalReport aggregated_dsc(
    const std::vector<std::pair<const LabelMap*, const LabelMap*>>& pred_ref,
    const std::vector<std::string>& ids, int num_classes) {
    if (pred_ref.size() != ids.size()) {
        throw std::invalid_argument("aggregated_dsc: ids do not match cases");
    }
    const int F = num_classes - 1;
    EvalReport rep;
    std::vector<std::int64_t> inter(F, 0), sizes(F, 0);
    for (std::size_t k = 0; k < pred_ref.size(); ++k) {
        const LabelMap* pred = pred_ref[k].first;
        const LabelMap* ref = pred_ref[k].second;
        if (pred->dims != ref->dims) {
            throw std::invalid_argument("aggregated_dsc: case '" + ids[k] +
                                        "' pred dims " + std::to_string(pred->dims[0]) + "x" +
                                        std::to_string(pred->dims[1]) + "x" +
                                        std::to_string(pred->dims[2]) + " do not match reference");
        }
        std::vector<std::int64_t> ci(F, 0), cp(F, 0), cg(F, 0);
        for (std::size_t i = 0; i < pred->vox.size(); ++i) {
            int p = pred->vox[i], g = ref->vox[i];
            if (p > 0 && p < num_classes) ++cp[p - 1];
            if (g > 0 && g < num_classes) ++cg[g - 1];
            if (p == g && p > 0 && p < num_classes) ++ci[p - 1];
        }
        EvalReport::CaseEntry entry;
        entry.id = ids[k];
        for (int c = 0; c < F; ++c) {
            std::int64_t denom = cp[c] + cg[c];
            entry.dsc.push_back(denom > 0 ? 2.0 * ci[c] / static_cast<double>(denom) : 1.0);
            inter[c] += ci[c];
            sizes[c] += denom;
        }
        rep.cases.push_back(std::move(entry));
    }
    rep.mean_aggregated = 0.0;
    for (int c = 0; c < F; ++c) {
        double v = sizes[c] > 0 ? 2.0 * inter[c] / static_cast<double>(sizes[c]) : 1.0;
        rep.aggregated.push_back(v);
        rep.mean_aggregated += v;
    }
    rep.mean_aggregated /= F;
    return rep;
}

namespace {

std::string class_label(int fg_index, int num_fg) {
    if (num_fg == 2) return fg_index == 0 ? "gtvp" : "gtvn";
    return "c" + std::to_string(fg_index + 1);
}

}  // namespace

std::string format_report(const EvalReport& report) {
    std::string out;
    char buf[64];
    const int F = static_cast<int>(report.aggregated.size());
    for (const auto& c : report.cases) {
        out += "case " + c.id;
        for (int k = 0; k < F; ++k) {
            std::snprintf(buf, sizeof(buf), " %s %.6f", class_label(k, F).c_str(), c.dsc[k]);
            out += buf;
        }
        out += "\n";
    }
    out += "aggregate";
    for (int k = 0; k < F; ++k) {
        std::snprintf(buf, sizeof(buf), " %s %.6f", class_label(k, F).c_str(),
                      report.aggregated[k]);
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), " mean %.6f\n", report.mean_aggregated);
    out += buf;
    return out;
}

void write_report(const std::string& path, const EvalReport& report) {
    write_file_text(path, format_report(report));
}

}  // namespace dfseg
