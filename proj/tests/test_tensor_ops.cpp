#include <doctest.h>

#include <cmath>

#include "dfseg/ops.hpp"
#include "dfseg/tensor.hpp"
#include "fd_check.hpp"

using namespace dfseg;
using test::fd_check;
using test::random_tensor;

TEST_CASE("conv3d 1x1x1 identity kernel reproduces the input") {
    Rng rng(1);
    auto x = random_tensor({2, 1, 3, 4, 5}, rng, false);
    auto w = Tensor::from_values({1, 1, 1, 1, 1}, {1.0});
    auto b = Tensor::from_values({1}, {0.0});
    auto y = conv3d(x, w, b, {1, 1, 1}, {0, 0, 0});
    CHECK(y->shape == x->shape);
    CHECK(y->values == x->values);
}

TEST_CASE("conv3d constant field with all-ones 3x3x3 kernel gives 27c") {
    const double c = 2.5;
    auto x = Tensor::full({1, 1, 5, 6, 6}, c);
    auto w = Tensor::full({1, 1, 3, 3, 3}, 1.0);
    auto y = conv3d(x, w, nullptr, {1, 1, 1}, {0, 0, 0});
    CHECK(y->shape == std::vector<int>{1, 1, 3, 4, 4});
    for (double v : y->values) CHECK(v == doctest::Approx(27.0 * c).epsilon(1e-12));
}

TEST_CASE("conv3d output size formula and stride behavior") {
    auto x = Tensor::zeros({1, 2, 8, 9, 10});
    auto w = Tensor::zeros({4, 2, 3, 3, 3});
    auto y = conv3d(x, w, nullptr, {2, 2, 2}, {1, 1, 1});
    CHECK(y->shape == std::vector<int>{1, 4, 4, 5, 5});
    auto same = conv3d(x, w, nullptr, {1, 1, 1}, {1, 1, 1});
    CHECK(same->shape == std::vector<int>{1, 4, 8, 9, 10});  // pad=k/2 preserves shape
}

TEST_CASE("conv3d rejects channel mismatch with a dimension-naming diagnostic") {
    auto x = Tensor::zeros({1, 3, 4, 4, 4});
    auto w = Tensor::zeros({2, 4, 3, 3, 3});
    bool threw = false;
    try {
        conv3d(x, w, nullptr, {1, 1, 1}, {1, 1, 1});
    } catch (const std::invalid_argument& e) {
        threw = true;
        CHECK(std::string(e.what()).find("Cin") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("conv3d gradients match finite differences") {
    Rng rng(2);
    auto x = random_tensor({1, 2, 5, 6, 6}, rng);
    auto w = random_tensor({2, 2, 3, 3, 3}, rng, true, 0.5);
    auto b = random_tensor({2}, rng);
    auto rep = fd_check([&] { return sum(conv3d(x, w, b, {1, 1, 1}, {1, 1, 1})); }, {x, w, b},
                        1e-4, 40, &rng);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_err < 1e-3);

    // strided variant exercises the non-unit-stride path
    auto rep2 = fd_check([&] { return sum(conv3d(x, w, b, {1, 2, 2}, {1, 1, 1})); }, {x, w, b},
                         1e-4, 40, &rng);
    CHECK(rep2.max_rel_err < 1e-3);
}

TEST_CASE("conv3d_transposed identity and hand-expanded upsample") {
    Rng rng(3);
    auto x = random_tensor({1, 1, 2, 3, 4}, rng, false);
    auto w = Tensor::from_values({1, 1, 1, 1, 1}, {1.0});
    auto y = conv3d_transposed(x, w, nullptr, {1, 1, 1});
    CHECK(y->values == x->values);

    const double a = 1.25, b = -2.5;
    auto in = Tensor::from_values({1, 1, 1, 1, 2}, {a, b});
    auto k2 = Tensor::from_values({1, 1, 1, 1, 2}, {1.0, 1.0});
    auto up = conv3d_transposed(in, k2, nullptr, {1, 1, 2});
    CHECK(up->shape == std::vector<int>{1, 1, 1, 1, 4});
    CHECK(up->values == std::vector<double>{a, a, b, b});
}

TEST_CASE("conv3d_transposed is the adjoint of conv3d") {
    // <conv(x), y> == <x, convT(y)> with matching geometry (pad 0)
    Rng rng(4);
    auto x = random_tensor({1, 2, 6, 6, 8}, rng, false);
    auto w = random_tensor({3, 2, 2, 2, 2}, rng, false);
    Dims3 stride{2, 2, 2};
    auto cx = conv3d(x, w, nullptr, stride, {0, 0, 0});

    auto y = random_tensor(cx->shape, rng, false);
    // conv weight [Cout=3, Cin=2, k] reads as transposed-conv weight
    // [Cin=3, Cout=2, k] with the same memory layout
    auto wt = Tensor::from_values({3, 2, 2, 2, 2}, w->values);
    auto ty = conv3d_transposed(y, wt, nullptr, stride);
    CHECK(ty->shape == x->shape);

    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < cx->values.size(); ++i) lhs += cx->values[i] * y->values[i];
    for (std::size_t i = 0; i < x->values.size(); ++i) rhs += x->values[i] * ty->values[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
}

TEST_CASE("conv3d_transposed gradients match finite differences") {
    Rng rng(5);
    auto x = random_tensor({1, 2, 3, 4, 4}, rng);
    auto w = random_tensor({2, 3, 2, 2, 2}, rng, true, 0.5);
    auto b = random_tensor({3}, rng);
    auto rep = fd_check([&] { return sum(conv3d_transposed(x, w, b, {2, 2, 2})); }, {x, w, b},
                        1e-4, 40, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("instance_norm normalizes each (n,c) slice") {
    Rng rng(6);
    auto x = random_tensor({2, 3, 4, 5, 5}, rng, false, 3.0);
    auto gamma = Tensor::full({3}, 1.0);
    auto beta = Tensor::zeros({3});
    auto y = instance_norm(x, gamma, beta);
    const std::int64_t V = 4 * 5 * 5;
    for (int n = 0; n < 2; ++n) {
        for (int c = 0; c < 3; ++c) {
            double s = 0.0, ss = 0.0;
            for (std::int64_t i = 0; i < V; ++i) {
                double v = y->values[(static_cast<std::int64_t>(n) * 3 + c) * V + i];
                s += v;
                ss += v * v;
            }
            double mean = s / V;
            CHECK(std::abs(mean) < 1e-6);
            CHECK(ss / V - mean * mean == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
}

TEST_CASE("instance_norm constant slice saturates to beta") {
    auto x = Tensor::full({1, 2, 2, 2, 2}, 7.0);
    auto gamma = Tensor::full({2}, 1.5);
    auto beta = Tensor::from_values({2}, {0.25, -0.5});
    auto y = instance_norm(x, gamma, beta);
    const std::int64_t V = 8;
    for (int c = 0; c < 2; ++c) {
        for (std::int64_t i = 0; i < V; ++i) {
            CHECK(y->values[c * V + i] == doctest::Approx(beta->values[c]).epsilon(1e-9));
        }
    }
}

TEST_CASE("instance_norm gradients match finite differences") {
    Rng rng(7);
    auto x = random_tensor({1, 2, 2, 3, 3}, rng);
    auto gamma = random_tensor({2}, rng);
    auto beta = random_tensor({2}, rng);
    auto rep = fd_check([&] { return sum(mul(instance_norm(x, gamma, beta),
                                             instance_norm(x, gamma, beta))); },
                        {x, gamma, beta}, 1e-4, 0, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("leaky_relu values and derivative factors") {
    auto x = Tensor::from_values({3}, {-1.0, 0.0, 2.0}, true);
    auto y = leaky_relu(x, 0.01);
    CHECK(y->values[0] == doctest::Approx(-0.01));
    CHECK(y->values[1] == 0.0);
    CHECK(y->values[2] == 2.0);
    backward(sum(y));
    CHECK(x->grad[0] == doctest::Approx(0.01));  // slope on the negative side
    CHECK(x->grad[2] == doctest::Approx(1.0));
    CHECK_THROWS_AS(leaky_relu(x, 1.5), std::invalid_argument);
}

TEST_CASE("leaky_relu gradient check away from the kink") {
    Rng rng(8);
    auto x = random_tensor({4, 5}, rng);
    auto exclude = [](const TensorPtr& t, std::size_t i) { return std::abs(t->values[i]) < 1e-3; };
    auto rep = fd_check([&] { return sum(mul(leaky_relu(x, 0.01), x)); }, {x}, 1e-4, 0, &rng,
                        exclude);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("softmax_channel is a distribution over channels") {
    auto x = Tensor::zeros({1, 3, 2, 2, 2});
    auto p = softmax_channel(x);
    for (double v : p->values) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    Rng rng(9);
    auto r = random_tensor({2, 4, 3, 3, 3}, rng, false, 3.0);
    auto pr = softmax_channel(r);
    const std::int64_t V = 27;
    for (int n = 0; n < 2; ++n) {
        for (std::int64_t v = 0; v < V; ++v) {
            double s = 0.0;
            for (int c = 0; c < 4; ++c) {
                s += pr->values[(static_cast<std::int64_t>(n) * 4 + c) * V + v];
            }
            CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("sigmoid value, range and gradient") {
    auto zero = Tensor::scalar(0.0);
    CHECK(sigmoid(zero)->values[0] == doctest::Approx(0.5));
    Rng rng(10);
    auto x = random_tensor({3, 4}, rng, true, 4.0);
    auto y = sigmoid(x);
    for (double v : y->values) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    auto rep = fd_check([&] { return sum(mul(sigmoid(x), x)); }, {x}, 1e-4, 0, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("softmax gradient check") {
    Rng rng(11);
    auto x = random_tensor({1, 3, 2, 2, 2}, rng);
    auto target = random_tensor({1, 3, 2, 2, 2}, rng, false);
    auto rep = fd_check([&] { return sum(mul(softmax_channel(x), target)); }, {x}, 1e-4, 0, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("elementwise/reduction/structure ops gradient checks") {
    Rng rng(12);
    auto a = random_tensor({2, 3, 2, 2, 2}, rng);
    auto b = random_tensor({2, 3, 2, 2, 2}, rng);

    CHECK(fd_check([&] { return sum(add(a, b)); }, {a, b}, 1e-4, 0, &rng).max_rel_err < 1e-3);
    CHECK(fd_check([&] { return sum(mul(a, b)); }, {a, b}, 1e-4, 0, &rng).max_rel_err < 1e-3);
    CHECK(fd_check([&] { return scale(mean(mul(a, a)), 3.0); }, {a}, 1e-4, 0, &rng).max_rel_err <
          1e-3);
    CHECK(fd_check([&] { return sum(mul(concat_channel(a, b), concat_channel(b, a))); }, {a, b},
                   1e-4, 0, &rng)
              .max_rel_err < 1e-3);

    auto g2 = random_tensor({2, 3}, rng);
    CHECK(fd_check([&] { return sum(mul(global_avg_pool(a), g2)); }, {a, g2}, 1e-4, 0, &rng)
              .max_rel_err < 1e-3);
    CHECK(fd_check([&] { return sum(mul_channel_gate(a, g2)); }, {a, g2}, 1e-4, 0, &rng)
              .max_rel_err < 1e-3);

    auto gs = random_tensor({2, 1, 2, 2, 2}, rng);
    CHECK(fd_check([&] { return sum(mul_spatial_gate(a, gs)); }, {a, gs}, 1e-4, 0, &rng)
              .max_rel_err < 1e-3);
    CHECK(fd_check([&] { return sum(mul(channel_mean(a), gs)); }, {a, gs}, 1e-4, 0, &rng)
              .max_rel_err < 1e-3);
    CHECK(fd_check([&] { return sum(mul(channel_max(a), gs)); }, {a}, 1e-4, 0, &rng).max_rel_err <
          1e-3);

    auto w = random_tensor({4, 3}, rng);
    auto fb = random_tensor({4}, rng);
    auto x2 = random_tensor({2, 3}, rng);
    CHECK(fd_check([&] { return sum(mul(fully_connected(x2, w, fb), fully_connected(x2, w, fb))); },
                   {x2, w, fb}, 1e-4, 0, &rng)
              .max_rel_err < 1e-3);
}

TEST_CASE("backward semantics") {
    SUBCASE("sum gives all-ones gradient") {
        auto x = Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
        backward(sum(x));
        for (double g : x->grad) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares at [1,2] gives [2,4]; repeated calls accumulate") {
        auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
        auto loss = sum(mul(x, x));
        backward(loss);
        CHECK(x->grad == std::vector<double>{2.0, 4.0});
        backward(loss);
        CHECK(x->grad == std::vector<double>{4.0, 8.0});
        x->zero_grad();
        backward(loss);
        CHECK(x->grad == std::vector<double>{2.0, 4.0});
    }
    SUBCASE("non-scalar loss is rejected") {
        auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
        CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
    }
    SUBCASE("no-grad guard suppresses graph recording") {
        auto x = Tensor::from_values({2}, {1.0, 2.0}, true);
        NoGradGuard ng;
        auto y = mul(x, x);
        CHECK(y->is_leaf());
        CHECK_FALSE(y->requires_grad);
    }
}

TEST_CASE("composite conv -> norm -> activation chain gradient") {
    Rng rng(13);
    auto x = random_tensor({1, 2, 4, 6, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3, 3}, rng, true, 0.4);
    auto b = random_tensor({3}, rng);
    auto gamma = Tensor::full({3}, 1.0, true);
    auto beta = Tensor::zeros({3}, true);
    auto loss_fn = [&] {
        auto y = conv3d(x, w, b, {1, 1, 1}, {1, 1, 1});
        y = instance_norm(y, gamma, beta);
        y = leaky_relu(y, 0.01);
        return sum(mul(y, y));
    };
    auto rep = fd_check(loss_fn, {x, w, b, gamma, beta}, 1e-4, 30, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("graph replay is deterministic") {
    Rng rng(14);
    auto x = random_tensor({1, 2, 4, 4, 4}, rng, false);
    auto w = random_tensor({2, 2, 3, 3, 3}, rng, false, 0.4);
    auto r1 = conv3d(x, w, nullptr, {1, 1, 1}, {1, 1, 1});
    auto r2 = conv3d(x, w, nullptr, {1, 1, 1}, {1, 1, 1});
    CHECK(r1->values == r2->values);
}
