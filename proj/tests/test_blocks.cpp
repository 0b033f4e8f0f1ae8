#include <doctest.h>

#include <cmath>

#include "dfseg/blocks.hpp"
#include "fd_check.hpp"

using namespace dfseg;
using test::fd_check;
using test::random_tensor;

namespace {

void randomize(ParamStore& ps, Rng& rng, double scale = 0.3) {
    for (const auto& name : ps.names()) {
        auto t = ps.at(name);
        if (ps.init_kind(name) == InitKind::ones) {
            for (auto& v : t->values) v = 1.0 + rng.uniform(-0.1, 0.1);
        } else {
            for (auto& v : t->values) v = rng.uniform(-scale, scale);
        }
    }
}

void zero_all(ParamStore& ps) {
    for (const auto& name : ps.names()) {
        auto t = ps.at(name);
        std::fill(t->values.begin(), t->values.end(), 0.0);
    }
}

}  // namespace

TEST_CASE("residual_stage: zero parameters give a zero output") {
    ParamStore ps;
    ResidualStage stage(ps, "s", StageSpec{4, 8, {1, 1, 1}});
    zero_all(ps);
    auto x = Tensor::full({1, 4, 4, 6, 6}, 1.5);
    auto y = stage.forward(x);
    CHECK(y->shape == std::vector<int>{1, 8, 4, 6, 6});
    for (double v : y->values) CHECK(v == 0.0);
}

TEST_CASE("residual_stage shape contract and channel check") {
    ParamStore ps;
    ResidualStage stage(ps, "s", StageSpec{4, 8, {1, 1, 1}});
    Rng rng(1);
    randomize(ps, rng);
    auto x = random_tensor({1, 4, 8, 16, 16}, rng, false);
    CHECK(stage.forward(x)->shape == std::vector<int>{1, 8, 8, 16, 16});
    auto bad = Tensor::zeros({1, 5, 8, 16, 16});
    CHECK_THROWS_AS(stage.forward(bad), std::invalid_argument);
}

TEST_CASE("residual_stage: gradient flows through both paths") {
    ParamStore ps;
    ResidualStage stage(ps, "s", StageSpec{2, 4, {1, 1, 1}});
    Rng rng(2);
    randomize(ps, rng);
    auto x = random_tensor({1, 2, 3, 4, 4}, rng);
    ps.zero_grad();
    x->ensure_grad();
    x->zero_grad();
    backward(sum(mul(stage.forward(x), stage.forward(x))));
    auto nonzero = [](const TensorPtr& t) {
        double s = 0.0;
        for (double g : t->grad) s += std::abs(g);
        return s > 0.0;
    };
    CHECK(nonzero(ps.at("s.c1.w")));    // conv path
    CHECK(nonzero(ps.at("s.proj.w")));  // projection skip path
    CHECK(nonzero(x));
}

TEST_CASE("residual_stage gradient check") {
    ParamStore ps;
    ResidualStage stage(ps, "s", StageSpec{2, 3, {1, 1, 1}});
    Rng rng(3);
    randomize(ps, rng);
    auto x = random_tensor({1, 2, 2, 4, 4}, rng);
    std::vector<TensorPtr> leaves = {x};
    for (const auto& n : ps.names()) leaves.push_back(ps.at(n));
    auto rep = fd_check([&] { return mean(mul(stage.forward(x), stage.forward(x))); }, leaves,
                        1e-4, 6, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("down_pool halves exactly the pooled axes") {
    Rng rng(4);
    {
        ParamStore ps;
        DownPool dp(ps, "d", StageSpec{4, 8, {1, 2, 2}});
        randomize(ps, rng);
        auto x = random_tensor({1, 4, 8, 16, 16}, rng, false);
        CHECK(dp.forward(x)->shape == std::vector<int>{1, 8, 8, 8, 8});
    }
    {
        ParamStore ps;
        DownPool dp(ps, "d", StageSpec{8, 16, {2, 2, 2}});
        randomize(ps, rng);
        auto x = random_tensor({1, 8, 8, 8, 8}, rng, false);
        CHECK(dp.forward(x)->shape == std::vector<int>{1, 16, 4, 4, 4});
        auto odd = random_tensor({1, 8, 7, 8, 8}, rng, false);
        CHECK_THROWS_AS(dp.forward(odd), std::invalid_argument);
    }
}

TEST_CASE("down_pool gradient check") {
    ParamStore ps;
    DownPool dp(ps, "d", StageSpec{2, 3, {1, 2, 2}});
    Rng rng(5);
    randomize(ps, rng);
    auto x = random_tensor({1, 2, 3, 4, 4}, rng);
    std::vector<TensorPtr> leaves = {x};
    for (const auto& n : ps.names()) leaves.push_back(ps.at(n));
    auto rep = fd_check([&] { return mean(mul(dp.forward(x), dp.forward(x))); }, leaves, 1e-4, 6,
                        &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("up_sample restores the pre-pool shape chain") {
    Rng rng(6);
    ParamStore ps;
    UpSample up1(ps, "u1", 16, 8, {2, 2, 2});
    UpSample up0(ps, "u0", 8, 4, {1, 2, 2});
    randomize(ps, rng);
    auto bottom = random_tensor({1, 16, 4, 4, 4}, rng, false);
    auto skip1 = random_tensor({1, 8, 8, 8, 8}, rng, false);
    auto skip0 = random_tensor({1, 4, 8, 16, 16}, rng, false);
    auto d1 = up1.forward(bottom, skip1);
    CHECK(d1->shape == std::vector<int>{1, 8, 8, 8, 8});
    auto d0 = up0.forward(d1, skip0);
    CHECK(d0->shape == std::vector<int>{1, 4, 8, 16, 16});

    auto bad_skip = random_tensor({1, 8, 8, 8, 9}, rng, false);
    CHECK_THROWS_AS(up1.forward(bottom, bad_skip), std::invalid_argument);
}

TEST_CASE("up_sample: skip influences output; zero skip is deterministic") {
    Rng rng(7);
    ParamStore ps;
    UpSample up(ps, "u", 4, 2, {1, 2, 2});
    randomize(ps, rng);
    auto x = random_tensor({1, 4, 2, 3, 3}, rng, false);
    auto zero_skip = Tensor::zeros({1, 2, 2, 6, 6});
    auto skip = random_tensor({1, 2, 2, 6, 6}, rng, false);
    auto y0 = up.forward(x, zero_skip);
    auto y0b = up.forward(x, zero_skip);
    CHECK(y0->values == y0b->values);  // depends only on the upsampled path
    auto y1 = up.forward(x, skip);
    double diff = 0.0;
    for (std::size_t i = 0; i < y0->values.size(); ++i) {
        diff += std::abs(y0->values[i] - y1->values[i]);
    }
    CHECK(diff > 0.0);
}

TEST_CASE("up_sample gradient check") {
    ParamStore ps;
    UpSample up(ps, "u", 3, 2, {1, 2, 2});
    Rng rng(8);
    randomize(ps, rng);
    auto x = random_tensor({1, 3, 2, 3, 3}, rng);
    auto skip = random_tensor({1, 2, 2, 6, 6}, rng);
    std::vector<TensorPtr> leaves = {x, skip};
    for (const auto& n : ps.names()) leaves.push_back(ps.at(n));
    auto rep = fd_check([&] { return mean(mul(up.forward(x, skip), up.forward(x, skip))); },
                        leaves, 1e-4, 6, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("supervision_head maps to 3 logit channels") {
    Rng rng(9);
    ParamStore ps;
    SupervisionHead head(ps, "h", 32, 3);
    randomize(ps, rng);
    auto x = random_tensor({1, 32, 8, 16, 16}, rng, false);
    CHECK(head.forward(x)->shape == std::vector<int>{1, 3, 8, 16, 16});
}

TEST_CASE("supervision_head with zero weights emits constant per-channel logits") {
    ParamStore ps;
    SupervisionHead head(ps, "h", 4, 3);
    zero_all(ps);
    ps.at("h.b")->values = {0.5, -1.0, 2.0};
    Rng rng(10);
    auto x = random_tensor({1, 4, 2, 3, 3}, rng, false);
    auto y = head.forward(x);
    const std::int64_t V = 2 * 3 * 3;
    for (int c = 0; c < 3; ++c) {
        for (std::int64_t v = 0; v < V; ++v) {
            CHECK(y->values[c * V + v] == ps.at("h.b")->values[c]);
        }
    }
}

TEST_CASE("supervision_head gradient check") {
    ParamStore ps;
    SupervisionHead head(ps, "h", 3, 3);
    Rng rng(11);
    randomize(ps, rng);
    auto x = random_tensor({1, 3, 2, 3, 3}, rng);
    std::vector<TensorPtr> leaves = {x, ps.at("h.w"), ps.at("h.b")};
    auto rep = fd_check([&] { return mean(mul(head.forward(x), head.forward(x))); }, leaves, 1e-4,
                        0, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}

TEST_CASE("cross_attention: zero secondary stream is the identity for any parameters") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
        ParamStore ps;
        CrossAttention attn(ps, "a", CrossAttentionSpec{4, 4});
        Rng rng(seed);
        randomize(ps, rng, 0.8);
        auto f_mid = random_tensor({1, 4, 4, 6, 6}, rng, false);
        auto zero = Tensor::zeros({1, 4, 4, 6, 6});
        auto y = attn.forward(f_mid, zero);
        CHECK(y->values == f_mid->values);
    }
}

TEST_CASE("cross_attention: both streams receive gradients") {
    ParamStore ps;
    CrossAttention attn(ps, "a", CrossAttentionSpec{4, 4});
    Rng rng(12);
    randomize(ps, rng);
    auto f_mid = random_tensor({1, 4, 3, 4, 4}, rng);
    auto f_pre = random_tensor({1, 4, 3, 4, 4}, rng);
    ps.zero_grad();
    f_mid->ensure_grad();
    f_pre->ensure_grad();
    backward(sum(mul(attn.forward(f_mid, f_pre), attn.forward(f_mid, f_pre))));
    auto mag = [](const TensorPtr& t) {
        double s = 0.0;
        for (double g : t->grad) s += std::abs(g);
        return s;
    };
    CHECK(mag(f_mid) > 0.0);
    CHECK(mag(f_pre) > 0.0);
}

TEST_CASE("cross_attention shape checks and reduction divisibility") {
    ParamStore ps;
    CHECK_THROWS_AS(CrossAttention(ps, "bad", CrossAttentionSpec{6, 4}), std::invalid_argument);
    ParamStore ps2;
    CrossAttention attn(ps2, "a", CrossAttentionSpec{4, 4});
    auto a = Tensor::zeros({1, 4, 2, 2, 2});
    auto b = Tensor::zeros({1, 4, 2, 2, 4});
    CHECK_THROWS_AS(attn.forward(a, b), std::invalid_argument);
}

TEST_CASE("cross_attention gradient check") {
    ParamStore ps;
    CrossAttention attn(ps, "a", CrossAttentionSpec{4, 4});
    Rng rng(13);
    randomize(ps, rng);
    auto f_mid = random_tensor({1, 4, 2, 3, 3}, rng);
    auto f_pre = random_tensor({1, 4, 2, 3, 3}, rng);
    std::vector<TensorPtr> leaves = {f_mid, f_pre};
    for (const auto& n : ps.names()) leaves.push_back(ps.at(n));
    auto rep = fd_check(
        [&] {
            auto y = attn.forward(f_mid, f_pre);
            return mean(mul(y, y));
        },
        leaves, 1e-4, 5, &rng);
    CHECK(rep.max_rel_err < 1e-3);
}
