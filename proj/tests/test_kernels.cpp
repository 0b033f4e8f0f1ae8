#include <doctest.h>

#include <cmath>
#include <vector>

#include "dfseg/kernels.hpp"
#include "dfseg/rng.hpp"

using namespace dfseg;

namespace {

const std::vector<std::size_t> kSizes = {0, 1, 2, 3, 4, 5, 7, 8, 9, 15, 16, 17, 31, 33, 100, 257};

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 2.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return v;
}

std::vector<float> random_vecf(std::size_t n, Rng& rng) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-2.0, 2.0));
    return v;
}

// Every ISA table the machine can run, against the scalar reference.
std::vector<const kern::Ops*> simd_tables() {
    std::vector<const kern::Ops*> out;
    if (kern::avx2_ops()) out.push_back(kern::avx2_ops());
    if (kern::neon_ops()) out.push_back(kern::neon_ops());
    return out;
}

}  // namespace

TEST_CASE("dispatch selects a table and scalar is always available") {
    CHECK(kern::scalar_ops().dot != nullptr);
    CHECK(kern::ops().name != nullptr);
}

TEST_CASE("simd elementwise kernels match scalar bitwise") {
    Rng rng(7);
    const auto& ref = kern::scalar_ops();
    for (const kern::Ops* simd : simd_tables()) {
        for (std::size_t n : kSizes) {
            auto a = random_vec(n, rng);
            auto b = random_vec(n, rng);
            double t = rng.uniform();

            std::vector<double> r1(n), r2(n);
            ref.add(r1.data(), a.data(), b.data(), n);
            simd->add(r2.data(), a.data(), b.data(), n);
            CHECK(r1 == r2);

            ref.mul(r1.data(), a.data(), b.data(), n);
            simd->mul(r2.data(), a.data(), b.data(), n);
            CHECK(r1 == r2);

            ref.scale(r1.data(), a.data(), t, n);
            simd->scale(r2.data(), a.data(), t, n);
            CHECK(r1 == r2);

            ref.lerp(r1.data(), a.data(), b.data(), t, n);
            simd->lerp(r2.data(), a.data(), b.data(), t, n);
            CHECK(r1 == r2);

            ref.leaky_relu_fwd(r1.data(), a.data(), 0.01, n);
            simd->leaky_relu_fwd(r2.data(), a.data(), 0.01, n);
            CHECK(r1 == r2);

            std::vector<double> y1 = b, y2 = b;
            ref.axpy(y1.data(), t, a.data(), n);
            simd->axpy(y2.data(), t, a.data(), n);
            CHECK(y1 == y2);

            std::vector<double> acc1 = random_vec(n, rng), acc2 = acc1;
            ref.fmadd(acc1.data(), a.data(), b.data(), n);
            simd->fmadd(acc2.data(), a.data(), b.data(), n);
            CHECK(acc1 == acc2);

            std::vector<double> dx1 = random_vec(n, rng), dx2 = dx1;
            ref.leaky_relu_bwd(dx1.data(), a.data(), b.data(), 0.01, n);
            simd->leaky_relu_bwd(dx2.data(), a.data(), b.data(), 0.01, n);
            CHECK(dx1 == dx2);

            auto fa = random_vecf(n, rng);
            auto fb = random_vecf(n, rng);
            std::vector<float> fc1 = random_vecf(n, rng), fc2 = fc1;
            ref.fmadd_f(fc1.data(), fa.data(), fb.data(), n);
            simd->fmadd_f(fc2.data(), fa.data(), fb.data(), n);
            CHECK(fc1 == fc2);
        }
    }
}

TEST_CASE("simd reductions agree with scalar within rounding noise") {
    Rng rng(11);
    const auto& ref = kern::scalar_ops();
    for (const kern::Ops* simd : simd_tables()) {
        for (std::size_t n : kSizes) {
            auto a = random_vec(n, rng);
            auto b = random_vec(n, rng);
            double tol = 1e-12 * (1.0 + static_cast<double>(n));

            CHECK(std::abs(ref.dot(a.data(), b.data(), n) - simd->dot(a.data(), b.data(), n)) <=
                  tol);
            CHECK(std::abs(ref.sum(a.data(), n) - simd->sum(a.data(), n)) <= tol);
            CHECK(std::abs(ref.sumsq_centered(a.data(), 0.25, n) -
                           simd->sumsq_centered(a.data(), 0.25, n)) <= tol);

            auto f = random_vecf(n, rng);
            CHECK(std::abs(ref.sum_f(f.data(), n) - simd->sum_f(f.data(), n)) <= tol);
        }
    }
}

TEST_CASE("kernel semantics on known values") {
    const auto& k = kern::ops();
    std::vector<double> x = {-1.0, 0.0, 2.0};
    std::vector<double> out(3);
    k.leaky_relu_fwd(out.data(), x.data(), 0.01, 3);
    CHECK(out[0] == doctest::Approx(-0.01));
    CHECK(out[1] == 0.0);
    CHECK(out[2] == 2.0);

    std::vector<double> a = {1.0, 2.0, 3.0}, b = {4.0, 5.0, 6.0};
    CHECK(k.dot(a.data(), b.data(), 3) == doctest::Approx(32.0));
    CHECK(k.sum(a.data(), 3) == doctest::Approx(6.0));
    CHECK(k.sumsq_centered(a.data(), 2.0, 3) == doctest::Approx(2.0));

    std::vector<double> l(3);
    k.lerp(l.data(), a.data(), b.data(), 1.0, 3);
    CHECK(l == a);
    k.lerp(l.data(), a.data(), b.data(), 0.0, 3);
    CHECK(l == b);
}
