#include "dfseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dfseg/kernels.hpp"

namespace dfseg {

namespace {

const kern::Ops& K() { return kern::ops(); }

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void require_rank(const TensorPtr& t, std::size_t rank, const char* who, const char* arg) {
    require(t && t->shape.size() == rank, std::string(who) + ": " + arg + " must have rank " +
                                              std::to_string(rank) + ", got " +
                                              (t ? shape_str(t->shape) : "null"));
}

std::int64_t spatial_count(const std::vector<int>& shape) {
    std::int64_t v = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) v *= shape[i];
    return v;
}

struct ConvDims {
    int N, Cin, D, H, W;
    int Cout, kd, kh, kw;
    int Do, Ho, Wo;
};

ConvDims conv_dims(const TensorPtr& input, const TensorPtr& weight, Dims3 stride, Dims3 pad) {
    ConvDims c{};
    c.N = input->shape[0];
    c.Cin = input->shape[1];
    c.D = input->shape[2];
    c.H = input->shape[3];
    c.W = input->shape[4];
    c.Cout = weight->shape[0];
    c.kd = weight->shape[2];
    c.kh = weight->shape[3];
    c.kw = weight->shape[4];
    require(weight->shape[1] == c.Cin,
            "conv3d: input has Cin=" + std::to_string(c.Cin) + " but weight expects Cin=" +
                std::to_string(weight->shape[1]));
    for (int a = 0; a < 3; ++a) {
        require(stride[a] >= 1, "conv3d: stride components must be >= 1");
        require(pad[a] >= 0, "conv3d: padding must be >= 0");
    }
    c.Do = (c.D + 2 * pad[0] - c.kd) / stride[0] + 1;
    c.Ho = (c.H + 2 * pad[1] - c.kh) / stride[1] + 1;
    c.Wo = (c.W + 2 * pad[2] - c.kw) / stride[2] + 1;
    require(c.D + 2 * pad[0] >= c.kd && c.H + 2 * pad[1] >= c.kh && c.W + 2 * pad[2] >= c.kw,
            "conv3d: kernel " + shape_str(weight->shape) + " does not fit padded input " +
                shape_str(input->shape));
    return c;
}

}  // namespace

TensorPtr conv3d(const TensorPtr& input, const TensorPtr& weight, const TensorPtr& bias,
                 Dims3 stride, Dims3 pad) {
    require_rank(input, 5, "conv3d", "input");
    require_rank(weight, 5, "conv3d", "weight");
    if (bias) {
        require_rank(bias, 1, "conv3d", "bias");
        require(bias->shape[0] == weight->shape[0],
                "conv3d: bias has " + std::to_string(bias->shape[0]) + " entries but Cout=" +
                    std::to_string(weight->shape[0]));
    }
    const ConvDims c = conv_dims(input, weight, stride, pad);
    const int sz = stride[0], sy = stride[1], sx = stride[2];
    const int pz = pad[0], py = pad[1], px = pad[2];

    auto out = make_node(
        {c.N, c.Cout, c.Do, c.Ho, c.Wo}, {input, weight, bias},
        [input, weight, bias, c, sz, sy, sx, pz, py, px](Tensor& self) {
            const double* g = self.grad.data();
            const double* in = input->values.data();
            const double* w = weight->values.data();
            const std::int64_t inCH = static_cast<std::int64_t>(c.D) * c.H * c.W;
            const std::int64_t outCH = static_cast<std::int64_t>(c.Do) * c.Ho * c.Wo;
            const std::int64_t kCH = static_cast<std::int64_t>(c.kd) * c.kh * c.kw;
            for (int n = 0; n < c.N; ++n) {
                for (int co = 0; co < c.Cout; ++co) {
                    const double* gbase = g + (static_cast<std::int64_t>(n) * c.Cout + co) * outCH;
                    if (bias && bias->requires_grad) {
                        bias->grad[co] += K().sum(gbase, static_cast<std::size_t>(outCH));
                    }
                    for (int zo = 0; zo < c.Do; ++zo) {
                        for (int yo = 0; yo < c.Ho; ++yo) {
                            const double* grow =
                                gbase + (static_cast<std::int64_t>(zo) * c.Ho + yo) * c.Wo;
                            for (int ci = 0; ci < c.Cin; ++ci) {
                                const double* inb =
                                    in + (static_cast<std::int64_t>(n) * c.Cin + ci) * inCH;
                                double* dinb =
                                    input->requires_grad
                                        ? input->grad.data() +
                                              (static_cast<std::int64_t>(n) * c.Cin + ci) * inCH
                                        : nullptr;
                                for (int kz = 0; kz < c.kd; ++kz) {
                                    int iz = zo * sz + kz - pz;
                                    if (iz < 0 || iz >= c.D) continue;
                                    for (int ky = 0; ky < c.kh; ++ky) {
                                        int iy = yo * sy + ky - py;
                                        if (iy < 0 || iy >= c.H) continue;
                                        const double* inrow =
                                            inb + (static_cast<std::int64_t>(iz) * c.H + iy) * c.W;
                                        const std::int64_t wbase =
                                            ((static_cast<std::int64_t>(co) * c.Cin + ci) * c.kd +
                                             kz) * c.kh * c.kw + static_cast<std::int64_t>(ky) * c.kw;
                                        if (sx == 1) {
                                            for (int kx = 0; kx < c.kw; ++kx) {
                                                int lo = std::max(0, px - kx);
                                                int hi = std::min(c.Wo - 1, c.W - 1 - kx + px);
                                                if (lo > hi) continue;
                                                std::size_t len = static_cast<std::size_t>(hi - lo + 1);
                                                const double* irow = inrow + lo + kx - px;
                                                if (weight->requires_grad) {
                                                    weight->grad[wbase + kx] +=
                                                        K().dot(grow + lo, irow, len);
                                                }
                                                if (dinb) {
                                                    double* drow =
                                                        dinb +
                                                        (static_cast<std::int64_t>(iz) * c.H + iy) *
                                                            c.W + lo + kx - px;
                                                    K().axpy(drow, w[wbase + kx], grow + lo, len);
                                                }
                                            }
                                        } else {
                                            for (int xo = 0; xo < c.Wo; ++xo) {
                                                int ix0 = xo * sx - px;
                                                double gv = grow[xo];
                                                for (int kx = 0; kx < c.kw; ++kx) {
                                                    int ix = ix0 + kx;
                                                    if (ix < 0 || ix >= c.W) continue;
                                                    if (weight->requires_grad) {
                                                        weight->grad[wbase + kx] += gv * inrow[ix];
                                                    }
                                                    if (dinb) {
                                                        dinb[(static_cast<std::int64_t>(iz) * c.H +
                                                              iy) * c.W + ix] +=
                                                            gv * w[wbase + kx];
                                                    }
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (void)kCH;
        });

    // forward
    double* o = out->values.data();
    const double* in = input->values.data();
    const double* w = weight->values.data();
    const std::int64_t inCH = static_cast<std::int64_t>(c.D) * c.H * c.W;
    const std::int64_t outCH = static_cast<std::int64_t>(c.Do) * c.Ho * c.Wo;
    for (int n = 0; n < c.N; ++n) {
        for (int co = 0; co < c.Cout; ++co) {
            double* obase = o + (static_cast<std::int64_t>(n) * c.Cout + co) * outCH;
            double b = bias ? bias->values[co] : 0.0;
            std::fill(obase, obase + outCH, b);
            for (int ci = 0; ci < c.Cin; ++ci) {
                const double* inb = in + (static_cast<std::int64_t>(n) * c.Cin + ci) * inCH;
                for (int zo = 0; zo < c.Do; ++zo) {
                    for (int kz = 0; kz < c.kd; ++kz) {
                        int iz = zo * sz + kz - pz;
                        if (iz < 0 || iz >= c.D) continue;
                        for (int yo = 0; yo < c.Ho; ++yo) {
                            double* orow = obase + (static_cast<std::int64_t>(zo) * c.Ho + yo) * c.Wo;
                            for (int ky = 0; ky < c.kh; ++ky) {
                                int iy = yo * sy + ky - py;
                                if (iy < 0 || iy >= c.H) continue;
                                const double* inrow =
                                    inb + (static_cast<std::int64_t>(iz) * c.H + iy) * c.W;
                                const double* wrow =
                                    w + ((static_cast<std::int64_t>(co) * c.Cin + ci) * c.kd + kz) *
                                            c.kh * c.kw + static_cast<std::int64_t>(ky) * c.kw;
                                if (sx == 1) {
                                    for (int kx = 0; kx < c.kw; ++kx) {
                                        int lo = std::max(0, px - kx);
                                        int hi = std::min(c.Wo - 1, c.W - 1 - kx + px);
                                        if (lo > hi) continue;
                                        K().axpy(orow + lo, wrow[kx], inrow + lo + kx - px,
                                                 static_cast<std::size_t>(hi - lo + 1));
                                    }
                                } else {
                                    for (int xo = 0; xo < c.Wo; ++xo) {
                                        int ix0 = xo * sx - px;
                                        double acc = 0.0;
                                        for (int kx = 0; kx < c.kw; ++kx) {
                                            int ix = ix0 + kx;
                                            if (ix < 0 || ix >= c.W) continue;
                                            acc = std::fma(wrow[kx], inrow[ix], acc);
                                        }
                                        orow[xo] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

TensorPtr conv3d_transposed(const TensorPtr& input, const TensorPtr& weight,
                            const TensorPtr& bias, Dims3 stride) {
    require_rank(input, 5, "conv3d_transposed", "input");
    require_rank(weight, 5, "conv3d_transposed", "weight");
    const int N = input->shape[0], Cin = input->shape[1];
    const int D = input->shape[2], H = input->shape[3], W = input->shape[4];
    require(weight->shape[0] == Cin,
            "conv3d_transposed: input has Cin=" + std::to_string(Cin) +
                " but weight expects Cin=" + std::to_string(weight->shape[0]));
    const int Cout = weight->shape[1];
    const int kd = weight->shape[2], kh = weight->shape[3], kw = weight->shape[4];
    for (int a = 0; a < 3; ++a) require(stride[a] >= 1, "conv3d_transposed: stride must be >= 1");
    if (bias) {
        require_rank(bias, 1, "conv3d_transposed", "bias");
        require(bias->shape[0] == Cout, "conv3d_transposed: bias/Cout mismatch");
    }
    const int sz = stride[0], sy = stride[1], sx = stride[2];
    const int Do = (D - 1) * sz + kd, Ho = (H - 1) * sy + kh, Wo = (W - 1) * sx + kw;

    const std::int64_t inCH = static_cast<std::int64_t>(D) * H * W;
    const std::int64_t outCH = static_cast<std::int64_t>(Do) * Ho * Wo;

    auto out = make_node(
        {N, Cout, Do, Ho, Wo}, {input, weight, bias},
        [=](Tensor& self) {
            const double* g = self.grad.data();
            const double* in = input->values.data();
            const double* w = weight->values.data();
            for (int n = 0; n < N; ++n) {
                for (int co = 0; co < Cout; ++co) {
                    const double* gbase = g + (static_cast<std::int64_t>(n) * Cout + co) * outCH;
                    if (bias && bias->requires_grad) {
                        bias->grad[co] += K().sum(gbase, static_cast<std::size_t>(outCH));
                    }
                    for (int ci = 0; ci < Cin; ++ci) {
                        const double* inb = in + (static_cast<std::int64_t>(n) * Cin + ci) * inCH;
                        double* dinb = input->requires_grad
                                           ? input->grad.data() +
                                                 (static_cast<std::int64_t>(n) * Cin + ci) * inCH
                                           : nullptr;
                        for (int z = 0; z < D; ++z) {
                            for (int y = 0; y < H; ++y) {
                                const double* inrow = inb + (static_cast<std::int64_t>(z) * H + y) * W;
                                double* dinrow =
                                    dinb ? dinb + (static_cast<std::int64_t>(z) * H + y) * W : nullptr;
                                for (int kz = 0; kz < kd; ++kz) {
                                    for (int ky = 0; ky < kh; ++ky) {
                                        const double* grow =
                                            gbase +
                                            (static_cast<std::int64_t>(z * sz + kz) * Ho + y * sy + ky) *
                                                Wo;
                                        const std::int64_t wbase =
                                            ((static_cast<std::int64_t>(ci) * Cout + co) * kd + kz) *
                                                kh * kw + static_cast<std::int64_t>(ky) * kw;
                                        for (int kx = 0; kx < kw; ++kx) {
                                            if (sx == 1) {
                                                if (weight->requires_grad) {
                                                    weight->grad[wbase + kx] += K().dot(
                                                        inrow, grow + kx, static_cast<std::size_t>(W));
                                                }
                                                if (dinrow) {
                                                    K().axpy(dinrow, w[wbase + kx], grow + kx,
                                                             static_cast<std::size_t>(W));
                                                }
                                            } else {
                                                for (int x = 0; x < W; ++x) {
                                                    double gv = grow[static_cast<std::int64_t>(x) * sx + kx];
                                                    if (weight->requires_grad) {
                                                        weight->grad[wbase + kx] += gv * inrow[x];
                                                    }
                                                    if (dinrow) dinrow[x] += gv * w[wbase + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    double* o = out->values.data();
    const double* in = input->values.data();
    const double* w = weight->values.data();
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            double* obase = o + (static_cast<std::int64_t>(n) * Cout + co) * outCH;
            double b = bias ? bias->values[co] : 0.0;
            std::fill(obase, obase + outCH, b);
            for (int ci = 0; ci < Cin; ++ci) {
                const double* inb = in + (static_cast<std::int64_t>(n) * Cin + ci) * inCH;
                for (int z = 0; z < D; ++z) {
                    for (int y = 0; y < H; ++y) {
                        const double* inrow = inb + (static_cast<std::int64_t>(z) * H + y) * W;
                        for (int kz = 0; kz < kd; ++kz) {
                            for (int ky = 0; ky < kh; ++ky) {
                                double* orow =
                                    obase +
                                    (static_cast<std::int64_t>(z * sz + kz) * Ho + y * sy + ky) * Wo;
                                const double* wrow =
                                    w + ((static_cast<std::int64_t>(ci) * Cout + co) * kd + kz) * kh *
                                            kw + static_cast<std::int64_t>(ky) * kw;
                                for (int kx = 0; kx < kw; ++kx) {
                                    if (sx == 1) {
                                        K().axpy(orow + kx, wrow[kx], inrow,
                                                 static_cast<std::size_t>(W));
                                    } else {
                                        for (int x = 0; x < W; ++x) {
                                            orow[static_cast<std::int64_t>(x) * sx + kx] =
                                                std::fma(wrow[kx], inrow[x],
                                                         orow[static_cast<std::int64_t>(x) * sx + kx]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

TensorPtr instance_norm(const TensorPtr& input, const TensorPtr& gamma, const TensorPtr& beta,
                        double eps) {
    require_rank(input, 5, "instance_norm", "input");
    require_rank(gamma, 1, "instance_norm", "gamma");
    require_rank(beta, 1, "instance_norm", "beta");
    const int N = input->shape[0], C = input->shape[1];
    require(gamma->shape[0] == C && beta->shape[0] == C,
            "instance_norm: gamma/beta must have C=" + std::to_string(C) + " entries");
    const std::int64_t V = spatial_count(input->shape);
    require(V >= 2, "instance_norm: spatial volume must be >= 2");

    auto stats = std::make_shared<std::vector<double>>();  // (mean, istd) per slice
    stats->resize(static_cast<std::size_t>(N) * C * 2);

    auto out = make_node(
        input->shape, {input, gamma, beta},
        [input, gamma, beta, stats, N, C, V](Tensor& self) {
            const double* g = self.grad.data();
            const double* in = input->values.data();
            for (int n = 0; n < N; ++n) {
                for (int ch = 0; ch < C; ++ch) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
                    const double mean = (*stats)[(static_cast<std::size_t>(n) * C + ch) * 2];
                    const double istd = (*stats)[(static_cast<std::size_t>(n) * C + ch) * 2 + 1];
                    const double* grow = g + base;
                    const double* xrow = in + base;
                    double s1 = 0.0, s2 = 0.0;
                    for (std::int64_t i = 0; i < V; ++i) {
                        double xh = (xrow[i] - mean) * istd;
                        s1 += grow[i];
                        s2 += grow[i] * xh;
                    }
                    if (beta->requires_grad) beta->grad[ch] += s1;
                    if (gamma->requires_grad) gamma->grad[ch] += s2;
                    if (input->requires_grad) {
                        double* dx = input->grad.data() + base;
                        const double gm = gamma->values[ch];
                        const double m1 = s1 / static_cast<double>(V);
                        const double m2 = s2 / static_cast<double>(V);
                        for (std::int64_t i = 0; i < V; ++i) {
                            double xh = (xrow[i] - mean) * istd;
                            dx[i] += gm * istd * (grow[i] - m1 - xh * m2);
                        }
                    }
                }
            }
        });

    const double* in = input->values.data();
    double* o = out->values.data();
    for (int n = 0; n < N; ++n) {
        for (int ch = 0; ch < C; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
            double mean = K().sum(in + base, static_cast<std::size_t>(V)) / static_cast<double>(V);
            double var =
                K().sumsq_centered(in + base, mean, static_cast<std::size_t>(V)) /
                static_cast<double>(V);
            double istd = 1.0 / std::sqrt(var + eps);
            (*stats)[(static_cast<std::size_t>(n) * C + ch) * 2] = mean;
            (*stats)[(static_cast<std::size_t>(n) * C + ch) * 2 + 1] = istd;
            const double gm = gamma->values[ch], bt = beta->values[ch];
            for (std::int64_t i = 0; i < V; ++i) {
                o[base + i] = std::fma(gm, (in[base + i] - mean) * istd, bt);
            }
        }
    }
    return out;
}

TensorPtr leaky_relu(const TensorPtr& input, double slope) {
    require(slope > 0.0 && slope < 1.0, "leaky_relu: slope must be in (0,1)");
    auto out = make_node(input->shape, {input}, [input, slope](Tensor& self) {
        if (!input->requires_grad) return;
        K().leaky_relu_bwd(input->grad.data(), input->values.data(), self.grad.data(), slope,
                           input->values.size());
    });
    K().leaky_relu_fwd(out->values.data(), input->values.data(), slope, input->values.size());
    return out;
}

TensorPtr sigmoid(const TensorPtr& input) {
    auto out = make_node(input->shape, {input}, [input](Tensor& self) {
        if (!input->requires_grad) return;
        double* dx = input->grad.data();
        const double* y = self.values.data();
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < self.values.size(); ++i) {
            dx[i] += g[i] * y[i] * (1.0 - y[i]);
        }
    });
    double* o = out->values.data();
    const double* x = input->values.data();
    for (std::size_t i = 0; i < input->values.size(); ++i) {
        if (x[i] >= 0.0) {
            o[i] = 1.0 / (1.0 + std::exp(-x[i]));
        } else {
            double e = std::exp(x[i]);
            o[i] = e / (1.0 + e);
        }
    }
    return out;
}

namespace {

// softmax over axis 1 for [N, C, ...]; rows indexed by (n, v)
void softmax_rows(const double* x, double* p, int N, int C, std::int64_t V) {
    for (int n = 0; n < N; ++n) {
        const double* xb = x + static_cast<std::int64_t>(n) * C * V;
        double* pb = p + static_cast<std::int64_t>(n) * C * V;
        for (std::int64_t v = 0; v < V; ++v) {
            double m = xb[v];
            for (int ch = 1; ch < C; ++ch) m = std::max(m, xb[static_cast<std::int64_t>(ch) * V + v]);
            double denom = 0.0;
            for (int ch = 0; ch < C; ++ch) {
                double e = std::exp(xb[static_cast<std::int64_t>(ch) * V + v] - m);
                pb[static_cast<std::int64_t>(ch) * V + v] = e;
                denom += e;
            }
            double inv = 1.0 / denom;
            for (int ch = 0; ch < C; ++ch) pb[static_cast<std::int64_t>(ch) * V + v] *= inv;
        }
    }
}

}  // namespace

TensorPtr softmax_channel(const TensorPtr& input) {
    require(input->shape.size() >= 2, "softmax_channel: need rank >= 2, got " +
                                          shape_str(input->shape));
    const int N = input->shape[0], C = input->shape[1];
    const std::int64_t V = spatial_count(input->shape);
    auto out = make_node(input->shape, {input}, [input, N, C, V](Tensor& self) {
        if (!input->requires_grad) return;
        const double* p = self.values.data();
        const double* g = self.grad.data();
        double* dx = input->grad.data();
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = static_cast<std::int64_t>(n) * C * V;
            for (std::int64_t v = 0; v < V; ++v) {
                double dotv = 0.0;
                for (int ch = 0; ch < C; ++ch) {
                    std::int64_t idx = base + static_cast<std::int64_t>(ch) * V + v;
                    dotv += g[idx] * p[idx];
                }
                for (int ch = 0; ch < C; ++ch) {
                    std::int64_t idx = base + static_cast<std::int64_t>(ch) * V + v;
                    dx[idx] += p[idx] * (g[idx] - dotv);
                }
            }
        }
    });
    softmax_rows(input->values.data(), out->values.data(), N, C, V);
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape, "add: shape mismatch " + shape_str(a->shape) + " vs " +
                                      shape_str(b->shape));
    auto out = make_node(a->shape, {a, b}, [a, b](Tensor& self) {
        const double* g = self.grad.data();
        if (a->requires_grad) K().axpy(a->grad.data(), 1.0, g, self.grad.size());
        if (b->requires_grad) K().axpy(b->grad.data(), 1.0, g, self.grad.size());
    });
    K().add(out->values.data(), a->values.data(), b->values.data(), a->values.size());
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape == b->shape, "mul: shape mismatch " + shape_str(a->shape) + " vs " +
                                      shape_str(b->shape));
    auto out = make_node(a->shape, {a, b}, [a, b](Tensor& self) {
        const double* g = self.grad.data();
        if (a->requires_grad) K().fmadd(a->grad.data(), g, b->values.data(), self.grad.size());
        if (b->requires_grad) K().fmadd(b->grad.data(), g, a->values.data(), self.grad.size());
    });
    K().mul(out->values.data(), a->values.data(), b->values.data(), a->values.size());
    return out;
}

TensorPtr scale(const TensorPtr& x, double factor) {
    auto out = make_node(x->shape, {x}, [x, factor](Tensor& self) {
        if (x->requires_grad) K().axpy(x->grad.data(), factor, self.grad.data(), self.grad.size());
    });
    K().scale(out->values.data(), x->values.data(), factor, x->values.size());
    return out;
}

TensorPtr concat_channel(const TensorPtr& a, const TensorPtr& b) {
    require(a->shape.size() == b->shape.size() && a->shape.size() >= 2,
            "concat_channel: rank mismatch");
    for (std::size_t i = 0; i < a->shape.size(); ++i) {
        if (i == 1) continue;
        require(a->shape[i] == b->shape[i], "concat_channel: non-channel dims differ: " +
                                                shape_str(a->shape) + " vs " + shape_str(b->shape));
    }
    const int N = a->shape[0];
    const std::int64_t Va = spatial_count(a->shape), Vb = spatial_count(b->shape);
    const std::int64_t blockA = a->shape[1] * Va, blockB = b->shape[1] * Vb;
    std::vector<int> shape = a->shape;
    shape[1] += b->shape[1];
    auto out = make_node(shape, {a, b}, [a, b, N, blockA, blockB](Tensor& self) {
        const double* g = self.grad.data();
        for (int n = 0; n < N; ++n) {
            const double* gn = g + static_cast<std::int64_t>(n) * (blockA + blockB);
            if (a->requires_grad) {
                K().axpy(a->grad.data() + static_cast<std::int64_t>(n) * blockA, 1.0, gn,
                         static_cast<std::size_t>(blockA));
            }
            if (b->requires_grad) {
                K().axpy(b->grad.data() + static_cast<std::int64_t>(n) * blockB, 1.0, gn + blockA,
                         static_cast<std::size_t>(blockB));
            }
        }
    });
    double* o = out->values.data();
    for (int n = 0; n < N; ++n) {
        std::copy_n(a->values.data() + static_cast<std::int64_t>(n) * blockA, blockA,
                    o + static_cast<std::int64_t>(n) * (blockA + blockB));
        std::copy_n(b->values.data() + static_cast<std::int64_t>(n) * blockB, blockB,
                    o + static_cast<std::int64_t>(n) * (blockA + blockB) + blockA);
    }
    return out;
}

TensorPtr sum(const TensorPtr& x) {
    auto out = make_node({1}, {x}, [x](Tensor& self) {
        if (!x->requires_grad) return;
        double g = self.grad[0];
        double* dx = x->grad.data();
        for (std::size_t i = 0; i < x->values.size(); ++i) dx[i] += g;
    });
    out->values[0] = K().sum(x->values.data(), x->values.size());
    return out;
}

TensorPtr mean(const TensorPtr& x) {
    const double inv = 1.0 / static_cast<double>(x->numel());
    auto out = make_node({1}, {x}, [x, inv](Tensor& self) {
        if (!x->requires_grad) return;
        double g = self.grad[0] * inv;
        double* dx = x->grad.data();
        for (std::size_t i = 0; i < x->values.size(); ++i) dx[i] += g;
    });
    out->values[0] = K().sum(x->values.data(), x->values.size()) * inv;
    return out;
}

TensorPtr global_avg_pool(const TensorPtr& x) {
    require_rank(x, 5, "global_avg_pool", "input");
    const int N = x->shape[0], C = x->shape[1];
    const std::int64_t V = spatial_count(x->shape);
    const double inv = 1.0 / static_cast<double>(V);
    auto out = make_node({N, C}, {x}, [x, N, C, V, inv](Tensor& self) {
        if (!x->requires_grad) return;
        for (int n = 0; n < N; ++n) {
            for (int ch = 0; ch < C; ++ch) {
                double g = self.grad[static_cast<std::size_t>(n) * C + ch] * inv;
                double* dx = x->grad.data() + (static_cast<std::int64_t>(n) * C + ch) * V;
                for (std::int64_t i = 0; i < V; ++i) dx[i] += g;
            }
        }
    });
    for (int n = 0; n < N; ++n) {
        for (int ch = 0; ch < C; ++ch) {
            out->values[static_cast<std::size_t>(n) * C + ch] =
                K().sum(x->values.data() + (static_cast<std::int64_t>(n) * C + ch) * V,
                        static_cast<std::size_t>(V)) * inv;
        }
    }
    return out;
}

TensorPtr fully_connected(const TensorPtr& x, const TensorPtr& weight, const TensorPtr& bias) {
    require_rank(x, 2, "fully_connected", "input");
    require_rank(weight, 2, "fully_connected", "weight");
    const int N = x->shape[0], F = x->shape[1], O = weight->shape[0];
    require(weight->shape[1] == F, "fully_connected: input features " + std::to_string(F) +
                                       " vs weight features " + std::to_string(weight->shape[1]));
    if (bias) require(bias->shape == std::vector<int>{O}, "fully_connected: bias size mismatch");
    auto out = make_node({N, O}, {x, weight, bias}, [x, weight, bias, N, F, O](Tensor& self) {
        const double* g = self.grad.data();
        for (int n = 0; n < N; ++n) {
            const double* grow = g + static_cast<std::int64_t>(n) * O;
            const double* xrow = x->values.data() + static_cast<std::int64_t>(n) * F;
            for (int o = 0; o < O; ++o) {
                if (bias && bias->requires_grad) bias->grad[o] += grow[o];
                if (weight->requires_grad) {
                    K().axpy(weight->grad.data() + static_cast<std::int64_t>(o) * F, grow[o], xrow,
                             static_cast<std::size_t>(F));
                }
                if (x->requires_grad) {
                    K().axpy(x->grad.data() + static_cast<std::int64_t>(n) * F, grow[o],
                             weight->values.data() + static_cast<std::int64_t>(o) * F,
                             static_cast<std::size_t>(F));
                }
            }
        }
    });
    for (int n = 0; n < N; ++n) {
        for (int o = 0; o < O; ++o) {
            double v = K().dot(x->values.data() + static_cast<std::int64_t>(n) * F,
                               weight->values.data() + static_cast<std::int64_t>(o) * F,
                               static_cast<std::size_t>(F));
            out->values[static_cast<std::size_t>(n) * O + o] = v + (bias ? bias->values[o] : 0.0);
        }
    }
    return out;
}

TensorPtr channel_mean(const TensorPtr& x) {
    require_rank(x, 5, "channel_mean", "input");
    const int N = x->shape[0], C = x->shape[1];
    const std::int64_t V = spatial_count(x->shape);
    const double inv = 1.0 / static_cast<double>(C);
    std::vector<int> shape = {N, 1, x->shape[2], x->shape[3], x->shape[4]};
    auto out = make_node(shape, {x}, [x, N, C, V, inv](Tensor& self) {
        if (!x->requires_grad) return;
        for (int n = 0; n < N; ++n) {
            const double* g = self.grad.data() + static_cast<std::int64_t>(n) * V;
            for (int ch = 0; ch < C; ++ch) {
                K().axpy(x->grad.data() + (static_cast<std::int64_t>(n) * C + ch) * V, inv, g,
                         static_cast<std::size_t>(V));
            }
        }
    });
    for (int n = 0; n < N; ++n) {
        double* o = out->values.data() + static_cast<std::int64_t>(n) * V;
        std::fill(o, o + V, 0.0);
        for (int ch = 0; ch < C; ++ch) {
            K().axpy(o, inv, x->values.data() + (static_cast<std::int64_t>(n) * C + ch) * V,
                     static_cast<std::size_t>(V));
        }
    }
    return out;
}

TensorPtr channel_max(const TensorPtr& x) {
    require_rank(x, 5, "channel_max", "input");
    const int N = x->shape[0], C = x->shape[1];
    require(C <= 255, "channel_max: channel count too large");
    const std::int64_t V = spatial_count(x->shape);
    auto argmax = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(N) * V);
    std::vector<int> shape = {N, 1, x->shape[2], x->shape[3], x->shape[4]};
    auto out = make_node(shape, {x}, [x, argmax, N, C, V](Tensor& self) {
        if (!x->requires_grad) return;
        for (int n = 0; n < N; ++n) {
            const double* g = self.grad.data() + static_cast<std::int64_t>(n) * V;
            for (std::int64_t v = 0; v < V; ++v) {
                int ch = (*argmax)[static_cast<std::size_t>(n) * V + v];
                x->grad[(static_cast<std::int64_t>(n) * C + ch) * V + v] += g[v];
            }
        }
    });
    for (int n = 0; n < N; ++n) {
        const double* xb = x->values.data() + static_cast<std::int64_t>(n) * C * V;
        double* o = out->values.data() + static_cast<std::int64_t>(n) * V;
        for (std::int64_t v = 0; v < V; ++v) {
            double best = xb[v];
            int bi = 0;
            for (int ch = 1; ch < C; ++ch) {
                double val = xb[static_cast<std::int64_t>(ch) * V + v];
                if (val > best) {  // ties keep the lowest channel
                    best = val;
                    bi = ch;
                }
            }
            o[v] = best;
            (*argmax)[static_cast<std::size_t>(n) * V + v] = static_cast<std::uint8_t>(bi);
        }
    }
    return out;
}

TensorPtr mul_channel_gate(const TensorPtr& x, const TensorPtr& gate) {
    require_rank(x, 5, "mul_channel_gate", "input");
    require_rank(gate, 2, "mul_channel_gate", "gate");
    const int N = x->shape[0], C = x->shape[1];
    require(gate->shape[0] == N && gate->shape[1] == C,
            "mul_channel_gate: gate " + shape_str(gate->shape) + " does not match features " +
                shape_str(x->shape));
    const std::int64_t V = spatial_count(x->shape);
    auto out = make_node(x->shape, {x, gate}, [x, gate, N, C, V](Tensor& self) {
        for (int n = 0; n < N; ++n) {
            for (int ch = 0; ch < C; ++ch) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
                const double* g = self.grad.data() + base;
                if (x->requires_grad) {
                    K().axpy(x->grad.data() + base, gate->values[static_cast<std::size_t>(n) * C + ch],
                             g, static_cast<std::size_t>(V));
                }
                if (gate->requires_grad) {
                    gate->grad[static_cast<std::size_t>(n) * C + ch] +=
                        K().dot(g, x->values.data() + base, static_cast<std::size_t>(V));
                }
            }
        }
    });
    for (int n = 0; n < N; ++n) {
        for (int ch = 0; ch < C; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
            K().scale(out->values.data() + base, x->values.data() + base,
                      gate->values[static_cast<std::size_t>(n) * C + ch], static_cast<std::size_t>(V));
        }
    }
    return out;
}

TensorPtr mul_spatial_gate(const TensorPtr& x, const TensorPtr& gate) {
    require_rank(x, 5, "mul_spatial_gate", "input");
    require_rank(gate, 5, "mul_spatial_gate", "gate");
    const int N = x->shape[0], C = x->shape[1];
    const std::int64_t V = spatial_count(x->shape);
    require(gate->shape[0] == N && gate->shape[1] == 1 && spatial_count(gate->shape) == V,
            "mul_spatial_gate: gate " + shape_str(gate->shape) + " does not match features " +
                shape_str(x->shape));
    auto out = make_node(x->shape, {x, gate}, [x, gate, N, C, V](Tensor& self) {
        for (int n = 0; n < N; ++n) {
            const double* gv = gate->values.data() + static_cast<std::int64_t>(n) * V;
            for (int ch = 0; ch < C; ++ch) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
                const double* g = self.grad.data() + base;
                if (x->requires_grad) {
                    K().fmadd(x->grad.data() + base, g, gv, static_cast<std::size_t>(V));
                }
                if (gate->requires_grad) {
                    K().fmadd(gate->grad.data() + static_cast<std::int64_t>(n) * V, g,
                              x->values.data() + base, static_cast<std::size_t>(V));
                }
            }
        }
    });
    for (int n = 0; n < N; ++n) {
        const double* gv = gate->values.data() + static_cast<std::int64_t>(n) * V;
        for (int ch = 0; ch < C; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
            K().mul(out->values.data() + base, x->values.data() + base, gv,
                    static_cast<std::size_t>(V));
        }
    }
    return out;
}

namespace {

void validate_target_rows(const TensorPtr& logits, const TensorPtr& target, bool strict_onehot,
                          double tol, const char* who) {
    require(logits->shape == target->shape, std::string(who) + ": logits " +
                                                shape_str(logits->shape) + " vs target " +
                                                shape_str(target->shape));
    const int N = logits->shape[0], C = logits->shape[1];
    const std::int64_t V = spatial_count(logits->shape);
    const double* t = target->values.data();
    for (int n = 0; n < N; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * C * V;
        for (std::int64_t v = 0; v < V; ++v) {
            double s = 0.0;
            for (int ch = 0; ch < C; ++ch) {
                double tv = t[base + static_cast<std::int64_t>(ch) * V + v];
                if (strict_onehot) {
                    require(tv == 0.0 || tv == 1.0,
                            std::string(who) + ": target is not one-hot (entry " +
                                std::to_string(tv) + ")");
                }
                s += tv;
            }
            require(std::abs(s - 1.0) <= tol, std::string(who) + ": target row sums to " +
                                                  std::to_string(s) + ", expected 1");
        }
    }
}

}  // namespace

TensorPtr soft_cross_entropy(const TensorPtr& logits, const TensorPtr& target, bool strict_onehot,
                             double row_sum_tol) {
    require(logits->shape.size() >= 2, "cross_entropy: need rank >= 2");
    validate_target_rows(logits, target, strict_onehot, row_sum_tol, "cross_entropy");
    const int N = logits->shape[0], C = logits->shape[1];
    const std::int64_t V = spatial_count(logits->shape);
    const std::int64_t R = static_cast<std::int64_t>(N) * V;

    auto out = make_node({1}, {logits, target}, [logits, target, N, C, V, R](Tensor& self) {
        if (!logits->requires_grad) return;
        const double g = self.grad[0] / static_cast<double>(R);
        std::vector<double> probs(logits->values.size());
        softmax_rows(logits->values.data(), probs.data(), N, C, V);
        double* dz = logits->grad.data();
        const double* t = target->values.data();
        for (std::size_t i = 0; i < probs.size(); ++i) dz[i] += g * (probs[i] - t[i]);
    });

    const double* z = logits->values.data();
    const double* t = target->values.data();
    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * C * V;
        for (std::int64_t v = 0; v < V; ++v) {
            double m = z[base + v];
            for (int ch = 1; ch < C; ++ch) {
                m = std::max(m, z[base + static_cast<std::int64_t>(ch) * V + v]);
            }
            double denom = 0.0, tz = 0.0;
            for (int ch = 0; ch < C; ++ch) {
                std::int64_t idx = base + static_cast<std::int64_t>(ch) * V + v;
                denom += std::exp(z[idx] - m);
                tz += t[idx] * z[idx];
            }
            total += m + std::log(denom) - tz;
        }
    }
    out->values[0] = total / static_cast<double>(R);
    return out;
}

TensorPtr soft_dice(const TensorPtr& logits, const TensorPtr& target, double smooth) {
    require(logits->shape.size() >= 2, "soft_dice: need rank >= 2");
    require(logits->shape == target->shape, "soft_dice: logits " + shape_str(logits->shape) +
                                                " vs target " + shape_str(target->shape));
    const int N = logits->shape[0], C = logits->shape[1];
    require(C >= 2, "soft_dice: need at least one foreground class");
    const std::int64_t V = spatial_count(logits->shape);
    const int F = C - 1;  // classes 1..C-1 are foreground

    // per-class pooled sums over the whole batch
    auto sums = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C) * 3, 0.0);

    auto out = make_node({1}, {logits, target}, [logits, target, sums, N, C, V, F, smooth](
                                                    Tensor& self) {
        if (!logits->requires_grad) return;
        const double g = self.grad[0];
        std::vector<double> probs(logits->values.size());
        softmax_rows(logits->values.data(), probs.data(), N, C, V);
        const double* t = target->values.data();
        double* dz = logits->grad.data();
        // dL/d p_c, linear coefficients per class: a_c * g_cv + b_c
        std::vector<double> ca(C, 0.0), cb(C, 0.0);
        for (int ch = 1; ch < C; ++ch) {
            double I = (*sums)[static_cast<std::size_t>(ch) * 3];
            double P = (*sums)[static_cast<std::size_t>(ch) * 3 + 1];
            double G = (*sums)[static_cast<std::size_t>(ch) * 3 + 2];
            double denom = P + G + smooth;
            // d(1 - dice_c)/dI = -2/denom ; /dP = (2I+smooth)/denom^2
            ca[ch] = -(1.0 / F) * (2.0 / denom);
            cb[ch] = (1.0 / F) * (2.0 * I + smooth) / (denom * denom);
        }
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = static_cast<std::int64_t>(n) * C * V;
            for (std::int64_t v = 0; v < V; ++v) {
                double dotv = 0.0;
                double dLdp[16];
                for (int ch = 0; ch < C; ++ch) {
                    std::int64_t idx = base + static_cast<std::int64_t>(ch) * V + v;
                    double d = ca[ch] * t[idx] + cb[ch];
                    dLdp[ch] = d;
                    dotv += d * probs[idx];
                }
                for (int ch = 0; ch < C; ++ch) {
                    std::int64_t idx = base + static_cast<std::int64_t>(ch) * V + v;
                    dz[idx] += g * probs[idx] * (dLdp[ch] - dotv);
                }
            }
        }
    });
    require(C <= 16, "soft_dice: supports up to 16 classes");

    std::vector<double> probs(logits->values.size());
    softmax_rows(logits->values.data(), probs.data(), N, C, V);
    const double* t = target->values.data();
    for (int n = 0; n < N; ++n) {
        for (int ch = 0; ch < C; ++ch) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + ch) * V;
            (*sums)[static_cast<std::size_t>(ch) * 3] +=
                K().dot(probs.data() + base, t + base, static_cast<std::size_t>(V));
            (*sums)[static_cast<std::size_t>(ch) * 3 + 1] +=
                K().sum(probs.data() + base, static_cast<std::size_t>(V));
            (*sums)[static_cast<std::size_t>(ch) * 3 + 2] +=
                K().sum(t + base, static_cast<std::size_t>(V));
        }
    }
    double dice = 0.0;
    for (int ch = 1; ch < C; ++ch) {
        double I = (*sums)[static_cast<std::size_t>(ch) * 3];
        double P = (*sums)[static_cast<std::size_t>(ch) * 3 + 1];
        double G = (*sums)[static_cast<std::size_t>(ch) * 3 + 2];
        dice += (2.0 * I + smooth) / (P + G + smooth);
    }
    out->values[0] = 1.0 - dice / F;
    return out;
}

}  // namespace dfseg
