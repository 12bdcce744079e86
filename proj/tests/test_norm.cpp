// SPDX-License-Identifier: Apache-2.0
//
// Normalization layer tests: statistics oracles, branch isolation, the
// two-branch forwards, and gradient checks through each path.

#include <doctest.h>

#include <cmath>
#include <vector>

#include "passnorm/norm.hpp"
#include "passnorm/ops.hpp"
#include "passnorm/rng.hpp"

using namespace passnorm;

namespace {

PassportNormState make_state(NormAlgo algo, int channels, int groups = 1) {
    PassportNormState st;
    st.kind.algo = algo;
    st.kind.groups = groups;
    st.kind.eps = 1e-5f;
    st.channels = channels;
    st.momentum = 0.1f;
    st.gamma0 = Tensor::ones({channels}, true);
    st.beta0 = Tensor::zeros({channels}, true);
    if (algo == NormAlgo::Batch) {
        st.running_mu0 = Tensor::zeros({channels});
        st.running_var0 = Tensor::ones({channels});
        st.running_mu1 = Tensor::zeros({channels});
        st.running_var1 = Tensor::ones({channels});
    }
    return st;
}

PassportNormState with_pipeline(PassportNormState st, std::uint64_t seed) {
    const int c = st.channels;
    const int h = pipeline_hidden_width(c);
    Rng r1 = stream_for(seed, "w1g"), r2 = stream_for(seed, "w2g");
    Rng r3 = stream_for(seed, "w1b"), r4 = stream_for(seed, "w2b");
    st.w1_gamma = Tensor::randn({c, h}, r1, true);
    st.w2_gamma = Tensor::randn({h, c}, r2, true);
    st.w1_beta = Tensor::randn({c, h}, r3, true);
    st.w2_beta = Tensor::randn({h, c}, r4, true);
    return st;
}

LayerPassport make_passport(PrecedentKind mode, std::vector<int> shape, std::uint64_t seed) {
    LayerPassport lp;
    lp.mode = mode;
    Rng rg = stream_for(seed, "pg"), rb = stream_for(seed, "pb");
    lp.p_gamma = Tensor::randn(shape, rg);
    lp.p_beta = Tensor::randn(shape, rb);
    return lp;
}

std::vector<float> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Deep copy so running-stat updates do not leak between evaluations.
PassportNormState copy_state(const PassportNormState& s) {
    PassportNormState d;
    d.kind = s.kind;
    d.channels = s.channels;
    d.momentum = s.momentum;
    d.gamma0 = s.gamma0.clone();
    d.beta0 = s.beta0.clone();
    if (s.running_mu0.defined()) {
        d.running_mu0 = s.running_mu0.clone();
        d.running_var0 = s.running_var0.clone();
    }
    d.init0 = s.init0;
    if (s.running_mu1.defined()) {
        d.running_mu1 = s.running_mu1.clone();
        d.running_var1 = s.running_var1.clone();
    }
    d.init1 = s.init1;
    if (s.w1_gamma.defined()) {
        d.w1_gamma = s.w1_gamma.clone();
        d.w2_gamma = s.w2_gamma.clone();
        d.w1_beta = s.w1_beta.clone();
        d.w2_beta = s.w2_beta.clone();
    }
    return d;
}

}  // namespace

TEST_CASE("BN statistics: constant batch gives mu=1, sigma=sqrt(eps)") {
    auto st = make_state(NormAlgo::Batch, 3);
    Tensor x = Tensor({4, 3}, 1.0f);
    auto [mu, sigma] = normalize_stats(x, st.kind, /*training=*/true, st, BranchMode::PassportFree);
    const auto ms = to_vec(mu);
    const auto ss = to_vec(sigma);
    for (float v : ms) CHECK(v == doctest::Approx(1.0f));
    for (float v : ss) CHECK(v == doctest::Approx(std::sqrt(1e-5f)).epsilon(1e-4));
}

TEST_CASE("IN statistics: symmetric values give mu=0, sigma=sqrt(1+eps)") {
    auto st = make_state(NormAlgo::Instance, 1);
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {-1.0f, 1.0f});
    auto [mu, sigma] = normalize_stats(x, st.kind, true, st, BranchMode::PassportFree);
    CHECK(mu.values()[0] == doctest::Approx(0.0f));
    CHECK(sigma.values()[0] == doctest::Approx(std::sqrt(1.0f + 1e-5f)));
}

TEST_CASE("GN statistics match the per-group slab oracle") {
    auto st = make_state(NormAlgo::Group, 4, 2);
    Rng rng(5);
    Tensor x = Tensor::randn({2, 4, 3, 3}, rng);
    auto [mu, sigma] = normalize_stats(x, st.kind, true, st, BranchMode::PassportFree);

    // Oracle: mean/var over each 2-channel slab by explicit loops.
    const auto xv = x.values();
    for (int n = 0; n < 2; ++n)
        for (int g = 0; g < 2; ++g) {
            double acc = 0.0;
            for (int c = 2 * g; c < 2 * g + 2; ++c)
                for (int i = 0; i < 9; ++i) acc += xv[(n * 4 + c) * 9 + i];
            const double m = acc / 18.0;
            double v = 0.0;
            for (int c = 2 * g; c < 2 * g + 2; ++c)
                for (int i = 0; i < 9; ++i) {
                    const double d = xv[(n * 4 + c) * 9 + i] - m;
                    v += d * d;
                }
            v /= 18.0;
            for (int c = 2 * g; c < 2 * g + 2; ++c) {
                CHECK(mu.values()[n * 4 + c] == doctest::Approx(m).epsilon(1e-4));
                CHECK(sigma.values()[n * 4 + c] ==
                      doctest::Approx(std::sqrt(v + 1e-5)).epsilon(1e-4));
            }
        }
}

TEST_CASE("running statistics updates") {
    auto st = make_state(NormAlgo::Batch, 2);
    Tensor mu1 = Tensor::from_data({2}, {1.0f, 2.0f});
    Tensor var1 = Tensor::from_data({2}, {4.0f, 9.0f});

    SUBCASE("momentum 0.1 blends a tenth of the batch in") {
        update_running_stats(st, BranchMode::PassportFree, mu1, var1);
        CHECK(st.running_mu0.values()[0] == doctest::Approx(0.1f));
        CHECK(st.running_var0.values()[1] == doctest::Approx(1.8f));
        CHECK(st.init0);
        CHECK(!st.init1);
    }
    SUBCASE("momentum 1 copies the batch exactly") {
        st.momentum = 1.0f;
        update_running_stats(st, BranchMode::PassportAware, mu1, var1);
        CHECK(st.running_mu1.values()[0] == 1.0f);
        CHECK(st.running_var1.values()[1] == 9.0f);
    }
    SUBCASE("passport-aware update leaves branch-0 buffers bit-identical") {
        const auto before_mu = to_vec(st.running_mu0);
        const auto before_var = to_vec(st.running_var0);
        update_running_stats(st, BranchMode::PassportAware, mu1, var1);
        CHECK(to_vec(st.running_mu0) == before_mu);
        CHECK(to_vec(st.running_var0) == before_var);
    }
    SUBCASE("non-BN kinds reject running updates") {
        auto gn = make_state(NormAlgo::Group, 2, 1);
        CHECK_THROWS_AS(update_running_stats(gn, BranchMode::PassportFree, mu1, var1),
                        UsageError);
    }
}

TEST_CASE("BN inference before any update raises uninitialized-statistics") {
    auto st = make_state(NormAlgo::Batch, 2);
    Tensor x = Tensor({4, 2}, 0.5f);
    CHECK_THROWS_AS(forward_passport_free(x, st, /*training=*/false), UninitializedStatsError);
    forward_passport_free(x, st, /*training=*/true);
    CHECK_NOTHROW(forward_passport_free(x, st, /*training=*/false));
}

TEST_CASE("passport-free forward: identity and constant-affine cases") {
    auto st = make_state(NormAlgo::Batch, 2);
    // x already zero-mean unit-variance per channel
    Tensor x = Tensor::from_data({2, 2}, {1.0f, -1.0f, -1.0f, 1.0f});
    Tensor y = forward_passport_free(x, st, true);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-3));

    // gamma0 = 0 collapses the output to beta0
    auto st2 = make_state(NormAlgo::Batch, 2);
    st2.gamma0 = Tensor::zeros({2}, true);
    st2.beta0 = Tensor::from_data({2}, {0.75f, -0.25f}, true);
    Tensor y2 = forward_passport_free(x, st2, true);
    CHECK(y2.values()[0] == 0.75f);
    CHECK(y2.values()[1] == -0.25f);
    CHECK(y2.values()[2] == 0.75f);
    CHECK(y2.values()[3] == -0.25f);
}

TEST_CASE("passport-free forward matches a two-step normalize-then-affine oracle") {
    Rng rng(19);
    for (NormAlgo algo : {NormAlgo::Batch, NormAlgo::Group, NormAlgo::Instance, NormAlgo::Layer}) {
        auto st = make_state(algo, 4, 2);
        Rng gr = stream_for(3, "g"), br = stream_for(3, "b");
        st.gamma0 = Tensor::randn({4}, gr, true);
        st.beta0 = Tensor::randn({4}, br, true);
        Tensor x = Tensor::randn({2, 4, 3, 3}, rng);
        Tensor y = forward_passport_free(x, st, true);

        auto st2 = make_state(algo, 4, 2);  // fresh running buffers for the oracle
        auto [mu, sigma] = normalize_stats(x, st2.kind, true, st2, BranchMode::PassportFree);
        const auto xv = x.values();
        const auto mv = mu.values();
        const auto sv = sigma.values();
        const auto gv = st.gamma0.values();
        const auto bv = st.beta0.values();
        for (int n = 0; n < 2; ++n)
            for (int c = 0; c < 4; ++c)
                for (int i = 0; i < 9; ++i) {
                    const std::size_t xi = (n * 4 + c) * 9 + i;
                    const std::size_t si = algo == NormAlgo::Batch ? c
                                           : algo == NormAlgo::Layer ? n
                                                                     : (n * 4 + c);
                    const float want = gv[c] * ((xv[xi] - mv[si]) / sv[si]) + bv[c];
                    CHECK(y.values()[xi] == doctest::Approx(want).epsilon(1e-5));
                }
    }
}

TEST_CASE("on-the-fly kinds return identical statistics for both branches") {
    for (NormAlgo algo : {NormAlgo::Group, NormAlgo::Instance, NormAlgo::Layer}) {
        auto st = make_state(algo, 4, 2);
        Rng rng(7);
        Tensor x = Tensor::randn({2, 4, 3, 3}, rng);
        auto [mu0, sigma0] = normalize_stats(x, st.kind, false, st, BranchMode::PassportFree);
        auto [mu1, sigma1] = normalize_stats(x, st.kind, false, st, BranchMode::PassportAware);
        CHECK(to_vec(mu0) == to_vec(mu1));
        CHECK(to_vec(sigma0) == to_vec(sigma1));
    }
}

TEST_CASE("passport-aware forward with identity pipeline equals plain normalization") {
    // w1 = w2 = identity (C_h = C) passes wp through; gamma1 = wp.
    const int c = 4;
    auto st = make_state(NormAlgo::Layer, c);
    std::vector<float> eye(c * c, 0.0f);
    for (int i = 0; i < c; ++i) eye[i * c + i] = 1.0f;
    st.w1_gamma = Tensor::from_data({c, c}, eye);
    st.w2_gamma = Tensor::from_data({c, c}, eye);
    st.w1_beta = Tensor::from_data({c, c}, eye);
    st.w2_beta = Tensor::from_data({c, c}, eye);

    Rng rng(11);
    Tensor x = Tensor::randn({3, c}, rng);
    // FC-mode passport with a weight that lands wp on all-positive values,
    // so the leaky-relu in the pipeline is exactly the identity.
    Tensor W = Tensor::from_data({2, c}, {1, 1, 1, 1, 0, 0, 0, 0});
    LayerPassport lp;
    lp.mode = PrecedentKind::FC;
    lp.p_gamma = Tensor::from_data({2}, {1.0f, 0.0f});  // wp_gamma = [1,1,1,1]
    lp.p_beta = Tensor::from_data({2}, {0.0f, 0.0f});   // wp_beta = 0

    Tensor aware = forward_passport_aware(x, st, lp, W, true);
    Tensor plain = normalize_pre_affine(x, st, BranchMode::PassportAware, true);
    for (std::size_t i = 0; i < aware.values().size(); ++i)
        CHECK(aware.values()[i] == doctest::Approx(plain.values()[i]).epsilon(1e-6));
}

TEST_CASE("passport-aware forward matches the composition oracle") {
    const int c = 8;
    auto st = with_pipeline(make_state(NormAlgo::Batch, c), 21);
    Rng rng(23);
    Tensor x = Tensor::randn({4, c, 3, 3}, rng);
    LayerPassport lp = make_passport(PrecedentKind::Conv, {2, 4, 4}, 29);
    Rng wr = stream_for(31, "w");
    Tensor W = Tensor::randn({c, 2, 3, 3}, wr);

    Tensor out = forward_passport_aware(x, st, lp, W, true);

    // Oracle: transform -> affine pipeline -> normalize -> affine, composed
    // from the public pieces on a fresh state.
    auto st2 = with_pipeline(make_state(NormAlgo::Batch, c), 21);
    Tensor wp_g = transform_passport(W, lp.p_gamma, lp.mode);
    Tensor wp_b = transform_passport(W, lp.p_beta, lp.mode);
    Tensor g1 = affine_from_passport(wp_g, st2.w1_gamma, st2.w2_gamma, kPipelineSlope);
    Tensor b1 = affine_from_passport(wp_b, st2.w1_beta, st2.w2_beta, kPipelineSlope);
    auto [mu, sigma] = normalize_stats(x, st2.kind, true, st2, BranchMode::PassportAware);
    const auto xv = x.values();
    for (int n = 0; n < 4; ++n)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < 9; ++i) {
                const std::size_t xi = (n * c + ch) * 9 + i;
                const float want =
                    g1.values()[ch] * ((xv[xi] - mu.values()[ch]) / sigma.values()[ch]) +
                    b1.values()[ch];
                CHECK(out.values()[xi] == doctest::Approx(want).epsilon(1e-5));
            }
}

TEST_CASE("baseline direct-affine forward") {
    const int c = 4;
    Rng rng(37);
    Tensor x = Tensor::randn({3, c}, rng);
    Tensor W = Tensor::randn({5, c}, rng);

    SUBCASE("wp_gamma = 1, wp_beta = 0 leaves the bare normalized input") {
        auto st = make_state(NormAlgo::Layer, c);
        LayerPassport lp;
        lp.mode = PrecedentKind::FC;
        Tensor Wc = Tensor::zeros({1, c});
        for (int i = 0; i < c; ++i) Wc.values_mut()[i] = 1.0f;
        lp.p_gamma = Tensor::from_data({1}, {1.0f});
        lp.p_beta = Tensor::from_data({1}, {0.0f});
        Tensor y = forward_passport_baseline(x, st, lp, Wc, true);
        Tensor bare = normalize_pre_affine(x, st, BranchMode::PassportFree, true);
        for (std::size_t i = 0; i < y.values().size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(bare.values()[i]).epsilon(1e-6));
    }

    SUBCASE("wp_gamma = 0 collapses the output to wp_beta") {
        auto st = make_state(NormAlgo::Layer, c);
        LayerPassport lp;
        lp.mode = PrecedentKind::FC;
        Tensor Wc = Tensor::zeros({1, c});
        for (int i = 0; i < c; ++i) Wc.values_mut()[i] = 0.5f;
        lp.p_gamma = Tensor::from_data({1}, {0.0f});
        lp.p_beta = Tensor::from_data({1}, {0.5f});  // wp_beta = 0.25 everywhere
        Tensor y = forward_passport_baseline(x, st, lp, Wc, true);
        for (float v : to_vec(y)) CHECK(v == doctest::Approx(0.25f).epsilon(1e-6));
    }

    SUBCASE("matches the shared-statistics direct forward to 1e-6") {
        auto st = make_state(NormAlgo::Batch, c);
        auto st2 = make_state(NormAlgo::Batch, c);
        LayerPassport lp = make_passport(PrecedentKind::FC, {5}, 41);
        Tensor xb = Tensor::randn({6, c}, rng);
        Tensor a = forward_passport_baseline(xb, st, lp, W, true);
        Tensor b = forward_passport_direct(xb, st2, lp, W, true, /*shared_stats=*/true);
        for (std::size_t i = 0; i < a.values().size(); ++i)
            CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-6));
        // Both routes updated the shared (branch-0) buffers, not the branch's.
        CHECK(st.init0);
        CHECK(st2.init0);
        CHECK(!st.init1);
        CHECK(!st2.init1);
    }
}

TEST_CASE("branch isolation: BN buffers of one branch never move with the other") {
    auto st = with_pipeline(make_state(NormAlgo::Batch, 4), 43);
    LayerPassport lp = make_passport(PrecedentKind::FC, {6}, 47);
    Rng wr = stream_for(53, "w");
    Tensor W = Tensor::randn({6, 4}, wr);
    Rng rng(59);

    for (int step = 0; step < 5; ++step) {
        Tensor x = Tensor::randn({8, 4}, rng);
        const auto mu0 = to_vec(st.running_mu0), var0 = to_vec(st.running_var0);
        forward_passport_aware(x, st, lp, W, true);
        CHECK(to_vec(st.running_mu0) == mu0);
        CHECK(to_vec(st.running_var0) == var0);

        const auto mu1 = to_vec(st.running_mu1), var1 = to_vec(st.running_var1);
        forward_passport_free(x, st, true);
        CHECK(to_vec(st.running_mu1) == mu1);
        CHECK(to_vec(st.running_var1) == var1);
    }
}

TEST_CASE("normalized pre-affine activations have near-zero mean and unit variance") {
    Rng rng(61);
    for (NormAlgo algo : {NormAlgo::Batch, NormAlgo::Group, NormAlgo::Instance, NormAlgo::Layer}) {
        auto st = make_state(algo, 4, 2);
        Tensor x = Tensor::randn({8, 4, 5, 5}, rng);
        Tensor xhat = normalize_pre_affine(x, st, BranchMode::PassportFree, true);
        // Every kind normalizes a partition of the tensor, so the global
        // moments are the pooled per-group moments.
        const double m = mean(xhat).item();
        const double v = mean(mul(xhat, xhat)).item() - m * m;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-3);
    }
}

TEST_CASE("gradients flow through each forward path") {
    Rng rng(67);
    const double eps = 1e-2, tol = 1e-3;

    for (NormAlgo algo : {NormAlgo::Batch, NormAlgo::Group, NormAlgo::Layer}) {
        auto st = with_pipeline(make_state(algo, 4, 2), 71);
        LayerPassport lp = make_passport(PrecedentKind::FC, {6}, 73);
        Rng wr = stream_for(79, "w");
        Tensor W = Tensor::randn({6, 4}, wr, true);
        Tensor x = Tensor::randn({8, 4}, rng, true);

        auto free_loss = [&](Tensor& t) {
            auto fresh = copy_state(st);
            Tensor y = forward_passport_free(t, fresh, true);
            return sum(mul(y, y));
        };
        CHECK(grad_check(free_loss, x, eps) < tol);

        auto aware_loss_x = [&](Tensor& t) {
            auto fresh = copy_state(st);
            Tensor y = forward_passport_aware(t, fresh, lp, W, true);
            return mean(mul(y, y));
        };
        CHECK(grad_check(aware_loss_x, x, eps) < tol);

        auto aware_loss_w = [&](Tensor& t) {
            auto fresh = copy_state(st);
            return mean(forward_passport_aware(x, fresh, lp, t, true));
        };
        CHECK(grad_check(aware_loss_w, W, eps) < tol);
    }
}
