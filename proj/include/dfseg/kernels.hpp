#pragma once

#include <cstddef>

namespace dfseg::kern {

// Inner-loop primitives behind the tensor ops. Every entry has a scalar
// reference implementation plus ISA variants (AVX2 on x86-64, NEON on
// aarch64) selected once at startup; DFSEG_KERNELS=scalar forces the
// reference path.
//
// Elementwise entries are defined so that every backend produces bitwise
// identical results (single fused multiply-add per element, matching
// std::fma in the reference). Reductions may reassociate and are only
// required to agree within rounding noise.
struct Ops {
    const char* name;

    // reductions
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum)(const double* x, std::size_t n);
    double (*sumsq_centered)(const double* x, double mean, std::size_t n);
    double (*sum_f)(const float* x, std::size_t n);

    // elementwise, bitwise-stable across backends
    void (*axpy)(double* y, double a, const double* x, std::size_t n);       // y += a*x
    void (*scale)(double* out, const double* x, double a, std::size_t n);    // out = a*x
    void (*add)(double* out, const double* a, const double* b, std::size_t n);
    void (*mul)(double* out, const double* a, const double* b, std::size_t n);
    void (*fmadd)(double* acc, const double* a, const double* b, std::size_t n);  // acc += a*b
    void (*fmadd_f)(float* acc, const float* a, const float* b, std::size_t n);
    void (*lerp)(double* out, const double* a, const double* b, double t,
                 std::size_t n);                                             // t*a + (1-t)*b
    void (*leaky_relu_fwd)(double* out, const double* x, double slope, std::size_t n);
    void (*leaky_relu_bwd)(double* dx, const double* x, const double* dy, double slope,
                           std::size_t n);                                   // dx += dy * f'(x)
};

const Ops& scalar_ops();

// Null when the build or CPU lacks the ISA.
const Ops* avx2_ops();
const Ops* neon_ops();

// Table selected for this process (scalar fallback always available).
const Ops& ops();

}  // namespace dfseg::kern
