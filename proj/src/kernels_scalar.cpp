#include "dfseg/kernels.hpp"

#include <cmath>

namespace dfseg::kern {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc = std::fma(a[i], b[i], acc);
    return acc;
}

double sum_scalar(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
}

double sumsq_centered_scalar(const double* x, double mean, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = x[i] - mean;
        acc = std::fma(d, d, acc);
    }
    return acc;
}

double sum_f_scalar(const float* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]);
    return acc;
}

void axpy_scalar(double* y, double a, const double* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void scale_scalar(double* out, const double* x, double a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i];
}

void add_scalar(double* out, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar(double* out, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void fmadd_scalar(double* acc, const double* a, const double* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) acc[i] = std::fma(a[i], b[i], acc[i]);
}

void fmadd_f_scalar(float* acc, const float* a, const float* b, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) acc[i] = std::fmaf(a[i], b[i], acc[i]);
}

void lerp_scalar(double* out, const double* a, const double* b, double t, std::size_t n) {
    double u = 1.0 - t;
    for (std::size_t i = 0; i < n; ++i) out[i] = std::fma(t, a[i], u * b[i]);
}

void leaky_relu_fwd_scalar(double* out, const double* x, double slope, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        double s = slope * x[i];
        out[i] = x[i] > s ? x[i] : s;  // max(x, slope*x), slope in (0,1)
    }
}

void leaky_relu_bwd_scalar(double* dx, const double* x, const double* dy, double slope,
                           std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        double f = x[i] > 0.0 ? 1.0 : slope;
        dx[i] = std::fma(dy[i], f, dx[i]);
    }
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops table = {
        "scalar",
        dot_scalar,
        sum_scalar,
        sumsq_centered_scalar,
        sum_f_scalar,
        axpy_scalar,
        scale_scalar,
        add_scalar,
        mul_scalar,
        fmadd_scalar,
        fmadd_f_scalar,
        lerp_scalar,
        leaky_relu_fwd_scalar,
        leaky_relu_bwd_scalar,
    };
    return table;
}

}  // namespace dfseg::kern
