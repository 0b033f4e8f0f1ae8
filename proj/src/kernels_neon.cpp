#include "dfseg/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

namespace dfseg::kern {
namespace {

double dot_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc0 = vdupq_n_f64(0.0);
    float64x2_t acc1 = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
        acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
    }
    double acc = vaddvq_f64(acc0) + vaddvq_f64(acc1);
    for (; i < n; ++i) acc = std::fma(a[i], b[i], acc);
    return acc;
}

double sum_neon(const double* x, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += x[i];
    return s;
}

double sumsq_centered_neon(const double* x, double mean, std::size_t n) {
    float64x2_t m = vdupq_n_f64(mean);
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t d = vsubq_f64(vld1q_f64(x + i), m);
        acc = vfmaq_f64(acc, d, d);
    }
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) {
        double d = x[i] - mean;
        s = std::fma(d, d, s);
    }
    return s;
}

double sum_f_neon(const float* x, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        acc = vaddq_f64(acc, vcvt_f64_f32(vld1_f32(x + i)));
    }
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += static_cast<double>(x[i]);
    return s;
}

void axpy_neon(double* y, double a, const double* x, std::size_t n) {
    float64x2_t av = vdupq_n_f64(a);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), av, vld1q_f64(x + i)));
    }
    for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void scale_neon(double* out, const double* x, double a, std::size_t n) {
    float64x2_t av = vdupq_n_f64(a);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(av, vld1q_f64(x + i)));
    for (; i < n; ++i) out[i] = a * x[i];
}

void add_neon(double* out, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_neon(double* out, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void fmadd_neon(double* acc, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(acc + i, vfmaq_f64(vld1q_f64(acc + i), vld1q_f64(a + i), vld1q_f64(b + i)));
    }
    for (; i < n; ++i) acc[i] = std::fma(a[i], b[i], acc[i]);
}

void fmadd_f_neon(float* acc, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        vst1q_f32(acc + i, vfmaq_f32(vld1q_f32(acc + i), vld1q_f32(a + i), vld1q_f32(b + i)));
    }
    for (; i < n; ++i) acc[i] = std::fmaf(a[i], b[i], acc[i]);
}

void lerp_neon(double* out, const double* a, const double* b, double t, std::size_t n) {
    float64x2_t tv = vdupq_n_f64(t);
    float64x2_t uv = vdupq_n_f64(1.0 - t);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t ub = vmulq_f64(uv, vld1q_f64(b + i));
        vst1q_f64(out + i, vfmaq_f64(ub, tv, vld1q_f64(a + i)));
    }
    double u = 1.0 - t;
    for (; i < n; ++i) out[i] = std::fma(t, a[i], u * b[i]);
}

void leaky_relu_fwd_neon(double* out, const double* x, double slope, std::size_t n) {
    float64x2_t sv = vdupq_n_f64(slope);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t xv = vld1q_f64(x + i);
        vst1q_f64(out + i, vmaxq_f64(xv, vmulq_f64(sv, xv)));
    }
    for (; i < n; ++i) {
        double s = slope * x[i];
        out[i] = x[i] > s ? x[i] : s;
    }
}

void leaky_relu_bwd_neon(double* dx, const double* x, const double* dy, double slope,
                         std::size_t n) {
    float64x2_t sv = vdupq_n_f64(slope);
    float64x2_t one = vdupq_n_f64(1.0);
    float64x2_t zero = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t xv = vld1q_f64(x + i);
        uint64x2_t mask = vcgtq_f64(xv, zero);
        float64x2_t f = vbslq_f64(mask, one, sv);
        vst1q_f64(dx + i, vfmaq_f64(vld1q_f64(dx + i), vld1q_f64(dy + i), f));
    }
    for (; i < n; ++i) {
        double f = x[i] > 0.0 ? 1.0 : slope;
        dx[i] = std::fma(dy[i], f, dx[i]);
    }
}

}  // namespace

const Ops* neon_ops() {
    static const Ops table = {
        "neon",
        dot_neon,
        sum_neon,
        sumsq_centered_neon,
        sum_f_neon,
        axpy_neon,
        scale_neon,
        add_neon,
        mul_neon,
        fmadd_neon,
        fmadd_f_neon,
        lerp_neon,
        leaky_relu_fwd_neon,
        leaky_relu_bwd_neon,
    };
    return &table;
}

}  // namespace dfseg::kern

#else

namespace dfseg::kern {
const Ops* neon_ops() { return nullptr; }
}  // namespace dfseg::kern

#endif
