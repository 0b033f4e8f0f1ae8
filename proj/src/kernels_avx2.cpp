#include "dfseg/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace dfseg::kern {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d shuf = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    }
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc = std::fma(a[i], b[i], acc);
    return acc;
}

double sum_avx2(const double* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
    }
    for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += x[i];
    return acc;
}

double sumsq_centered_avx2(const double* x, double mean, std::size_t n) {
    __m256d m = _mm256_set1_pd(mean);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d d = _mm256_sub_pd(_mm256_loadu_pd(x + i), m);
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        double d = x[i] - mean;
        s = std::fma(d, d, s);
    }
    return s;
}

double sum_f_avx2(const float* x, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        acc = _mm256_add_pd(acc, _mm256_cvtps_pd(_mm_loadu_ps(x + i)));
    }
    double s = hsum(acc);
    for (; i < n; ++i) s += static_cast<double>(x[i]);
    return s;
}

void axpy_avx2(double* y, double a, const double* x, std::size_t n) {
    __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d r = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
        _mm256_storeu_pd(y + i, r);
    }
    for (; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void scale_avx2(double* out, const double* x, double a, std::size_t n) {
    __m256d av = _mm256_set1_pd(a);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    }
    for (; i < n; ++i) out[i] = a * x[i];
}

void add_avx2(double* out, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(double* out, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void fmadd_avx2(double* acc, const double* a, const double* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d r = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i),
                                    _mm256_loadu_pd(acc + i));
        _mm256_storeu_pd(acc + i, r);
    }
    for (; i < n; ++i) acc[i] = std::fma(a[i], b[i], acc[i]);
}

void fmadd_f_avx2(float* acc, const float* a, const float* b, std::size_t n) {
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 r = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i),
                                   _mm256_loadu_ps(acc + i));
        _mm256_storeu_ps(acc + i, r);
    }
    for (; i < n; ++i) acc[i] = std::fmaf(a[i], b[i], acc[i]);
}

void lerp_avx2(double* out, const double* a, const double* b, double t, std::size_t n) {
    __m256d tv = _mm256_set1_pd(t);
    __m256d uv = _mm256_set1_pd(1.0 - t);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d ub = _mm256_mul_pd(uv, _mm256_loadu_pd(b + i));
        _mm256_storeu_pd(out + i, _mm256_fmadd_pd(tv, _mm256_loadu_pd(a + i), ub));
    }
    double u = 1.0 - t;
    for (; i < n; ++i) out[i] = std::fma(t, a[i], u * b[i]);
}

void leaky_relu_fwd_avx2(double* out, const double* x, double slope, std::size_t n) {
    __m256d sv = _mm256_set1_pd(slope);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        _mm256_storeu_pd(out + i, _mm256_max_pd(xv, _mm256_mul_pd(sv, xv)));
    }
    for (; i < n; ++i) {
        double s = slope * x[i];
        out[i] = x[i] > s ? x[i] : s;
    }
}

void leaky_relu_bwd_avx2(double* dx, const double* x, const double* dy, double slope,
                         std::size_t n) {
    __m256d sv = _mm256_set1_pd(slope);
    __m256d one = _mm256_set1_pd(1.0);
    __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d xv = _mm256_loadu_pd(x + i);
        __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
        __m256d f = _mm256_blendv_pd(sv, one, mask);
        __m256d r = _mm256_fmadd_pd(_mm256_loadu_pd(dy + i), f, _mm256_loadu_pd(dx + i));
        _mm256_storeu_pd(dx + i, r);
    }
    for (; i < n; ++i) {
        double f = x[i] > 0.0 ? 1.0 : slope;
        dx[i] = std::fma(dy[i], f, dx[i]);
    }
}

}  // namespace

const Ops* avx2_ops() {
    if (!__builtin_cpu_supports("avx2") || !__builtin_cpu_supports("fma")) return nullptr;
    static const Ops table = {
        "avx2",
        dot_avx2,
        sum_avx2,
        sumsq_centered_avx2,
        sum_f_avx2,
        axpy_avx2,
        scale_avx2,
        add_avx2,
        mul_avx2,
        fmadd_avx2,
        fmadd_f_avx2,
        lerp_avx2,
        leaky_relu_fwd_avx2,
        leaky_relu_bwd_avx2,
    };
    return &table;
}

}  // namespace dfseg::kern

#else

namespace dfseg::kern {
const Ops* avx2_ops() { return nullptr; }
}  // namespace dfseg::kern

#endif
