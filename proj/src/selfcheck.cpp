// SPDX-License-Identifier: Apache-2.0

#include "passnorm/selfcheck.hpp"

#include <algorithm>
#include <cmath>

#include "passnorm/norm.hpp"
#include "passnorm/ops.hpp"
#include "passnorm/passport.hpp"

namespace passnorm {
namespace {

// Fan-in-scaled random parameters, matching the scales the layers train at;
// unit-scale pipelines would blow the affine outputs up and with them the
// curvature the finite-difference oracle has to fight.
PassportNormState random_state(NormAlgo algo, int channels, int groups, Rng& rng) {
    PassportNormState st;
    st.kind.algo = algo;
    st.kind.groups = groups;
    st.channels = channels;
    st.gamma0 = Tensor::randn({channels}, rng, true);
    st.beta0 = Tensor::randn({channels}, rng, true);
    if (algo == NormAlgo::Batch) {
        st.running_mu0 = Tensor::zeros({channels});
        st.running_var0 = Tensor::ones({channels});
        st.running_mu1 = Tensor::zeros({channels});
        st.running_var1 = Tensor::ones({channels});
    }
    const int hidden = pipeline_hidden_width(channels);
    const float s1 = 1.0f / std::sqrt(static_cast<float>(channels));
    const float s2 = 1.0f / std::sqrt(static_cast<float>(hidden));
    auto scaled = [&](std::vector<int> shape, float s) {
        Tensor t = Tensor::randn(std::move(shape), rng, true);
        for (auto& v : t.values_mut()) v *= s;
        return t;
    };
    st.w1_gamma = scaled({channels, hidden}, s1);
    st.w2_gamma = scaled({hidden, channels}, s2);
    st.w1_beta = scaled({channels, hidden}, s1);
    st.w2_beta = scaled({hidden, channels}, s2);
    return st;
}

PassportNormState copy_state(const PassportNormState& s) {
    PassportNormState d = s;
    d.gamma0 = s.gamma0.clone();
    d.beta0 = s.beta0.clone();
    if (s.running_mu0.defined()) {
        d.running_mu0 = s.running_mu0.clone();
        d.running_var0 = s.running_var0.clone();
    }
    if (s.running_mu1.defined()) {
        d.running_mu1 = s.running_mu1.clone();
        d.running_var1 = s.running_var1.clone();
    }
    return d;
}

}  // namespace

std::vector<std::pair<std::string, double>> gradient_check_suite(std::uint64_t seed, double eps) {
    std::vector<std::pair<std::string, double>> out;
    Rng rng = stream_for(seed, "selfcheck");

    auto record = [&](const std::string& name, auto&& f, Tensor& x) {
        out.emplace_back(name, grad_check(f, x, eps));
    };

    // Elementwise and reduction primitives.
    for (int rep = 0; rep < 3; ++rep) {
        const std::string tag = "#" + std::to_string(rep);
        Tensor a = Tensor::randn({3, 4}, rng, true);
        Tensor b = Tensor::randn({3, 4}, rng, true);
        Tensor row = Tensor::randn({1, 4}, rng, true);
        record("add" + tag, [&](Tensor& t) { return sum(add(t, b)); }, a);
        record("sub" + tag, [&](Tensor& t) { return sum(sub(b, t)); }, a);
        record("mul" + tag, [&](Tensor& t) { return sum(mul(t, b)); }, a);
        record("mul_broadcast" + tag, [&](Tensor& t) { return sum(mul(a, t)); }, row);
        Tensor den = Tensor::rand_uniform({3, 4}, 0.5f, 2.0f, rng, true);
        record("div" + tag, [&](Tensor& t) { return sum(divide(a, t)); }, den);
        Tensor pos = Tensor::rand_uniform({6}, 0.5f, 2.0f, rng, true);
        record("sqrt" + tag, [&](Tensor& t) { return sum(passnorm::sqrt(t)); }, pos);
        record("mean_axes" + tag, [&](Tensor& t) { return sum(mean(t, {0}, true)); }, a);
        record("sum_axes" + tag, [&](Tensor& t) { return mean(sum(t, {1}, false)); }, a);
        record("reshape" + tag,
               [&](Tensor& t) { return sum(mul(reshape(t, {4, 3}), reshape(t, {4, 3}))); }, a);
        // Kink at zero: keep the sample coordinates clear of it.
        std::vector<float> lv(12);
        for (auto& v : lv)
            v = static_cast<float>((rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.15, 2.0));
        Tensor lx = Tensor::from_data({3, 4}, std::move(lv), true);
        record("leaky_relu" + tag, [&](Tensor& t) { return sum(leaky_relu(t, 0.01f)); }, lx);
        record("slice_concat" + tag,
               [&](Tensor& t) { return sum(mul(concat_rows(t, b), concat_rows(b, t))); }, a);
    }

    // matmul / conv / pooling / loss.
    for (int rep = 0; rep < 3; ++rep) {
        const std::string tag = "#" + std::to_string(rep);
        Tensor m1 = Tensor::randn({3, 5}, rng, true);
        Tensor m2 = Tensor::randn({5, 2}, rng, true);
        record("matmul_lhs" + tag, [&](Tensor& t) { return sum(matmul(t, m2)); }, m1);
        record("matmul_rhs" + tag, [&](Tensor& t) { return sum(matmul(m1, t)); }, m2);

        Tensor xc = Tensor::randn({2, 2, 5, 5}, rng, true);
        Tensor wc = Tensor::randn({3, 2, 3, 3}, rng, true);
        record("conv2d_input" + tag, [&](Tensor& t) { return sum(conv2d(t, wc, 1, 1)); }, xc);
        record("conv2d_kernel" + tag, [&](Tensor& t) { return sum(conv2d(xc, t, 2, 1)); }, wc);
        record("global_avg_pool" + tag, [&](Tensor& t) { return sum(global_avg_pool(t)); }, xc);
        record("avg_pool2d" + tag, [&](Tensor& t) { return sum(avg_pool2d(t, 2, 2)); }, xc);

        Tensor logits = Tensor::randn({4, 3}, rng, true);
        const std::vector<int> labels = {0, 2, 1, 2};
        record("cross_entropy" + tag, [&](Tensor& t) { return cross_entropy(t, labels); }, logits);
    }

    // Composed passport-aware norm layer + the full training loss shape
    // (task CE + hinge), checked against the layer weight, the input, and
    // the pipeline weights, for each statistics kind and both layer modes.
    // Instances are redrawn when a pipeline pre-activation or a hinge
    // argument sits within reach of its kink, so the central difference
    // stays on one smooth piece.
    // Composed layer+loss instances use a reduced step: their higher-order
    // terms dominate the truncation error well before float noise does.
    const double eps_c = std::min(eps, 1e-3);
    const double kink_margin = 10.0 * eps;
    for (NormAlgo algo : {NormAlgo::Batch, NormAlgo::Group, NormAlgo::Layer}) {
        const std::string tag = algo == NormAlgo::Batch ? "bn" : algo == NormAlgo::Group ? "gn" : "ln";
        const int c = 8;
        auto st = random_state(algo, c, 2, rng);
        LayerPassport lp;
        lp.mode = PrecedentKind::FC;
        Tensor W, x;
        std::vector<int> targets(c);
        for (int attempt = 0; attempt < 50; ++attempt) {
            lp.p_gamma = Tensor::randn({6}, rng);
            lp.p_beta = Tensor::randn({6}, rng);
            W = Tensor::randn({6, c}, rng, true);
            x = Tensor::randn({8, 6}, rng, true);
            for (auto& t : targets) t = rng.uniform() < 0.5 ? -1 : 1;

            NoGradGuard no_grad;
            double dist = 1e30;
            for (const Tensor& p : {lp.p_gamma, lp.p_beta}) {
                Tensor wp = transform_passport(W, p, lp.mode);
                for (const Tensor& w1 : {st.w1_gamma, st.w1_beta}) {
                    Tensor h = matmul(reshape(wp, {1, c}), w1);
                    for (float v : h.values()) dist = std::min(dist, double(std::abs(v)));
                }
                for (int i = 0; i < c; ++i)
                    dist = std::min(dist,
                                    double(std::abs(0.5f - targets[i] * wp.values()[i])));
            }
            // Near-degenerate statistics make the normalization too curved
            // for the finite-difference oracle; require well-spread groups.
            auto probe = copy_state(st);
            auto [mu, sigma] =
                normalize_stats(matmul(x, W), probe.kind, true, probe, BranchMode::PassportAware);
            double min_sigma = 1e30;
            for (float v : sigma.values()) min_sigma = std::min(min_sigma, double(v));
            if (dist > kink_margin && min_sigma > 0.8) break;
        }
        const std::vector<int> labels = {0, 1, 2, 3, 4, 5, 6, 7};

        auto layer_loss = [&](const Tensor& weight, const Tensor& input) {
            auto fresh = copy_state(st);
            Tensor z = matmul(input, weight);
            Tensor y = forward_passport_aware(z, fresh, lp, weight, true);
            Tensor task = cross_entropy(y, labels);
            Tensor wp_g = transform_passport(weight, lp.p_gamma, lp.mode);
            Tensor wp_b = transform_passport(weight, lp.p_beta, lp.mode);
            Tensor hinge = add(signature_hinge_loss(wp_g, targets, 0.5f),
                               signature_hinge_loss(wp_b, targets, 0.5f));
            return add(task, mul_scalar(hinge, 0.05f));
        };
        out.emplace_back("layer_loss_w_" + tag,
                         grad_check([&](Tensor& t) { return layer_loss(t, x); }, W, eps_c));
        out.emplace_back("layer_loss_x_" + tag,
                         grad_check([&](Tensor& t) { return layer_loss(W, t); }, x, eps_c));
        out.emplace_back("layer_loss_w1g_" + tag,
                         grad_check([&](Tensor& t) { (void)t; return layer_loss(W, x); },
                                    st.w1_gamma, eps_c));
        out.emplace_back("layer_loss_w2b_" + tag,
                         grad_check([&](Tensor& t) { (void)t; return layer_loss(W, x); },
                                    st.w2_beta, eps_c));
    }

    // Conv-mode composed layer.
    {
        const int c = 8;
        auto st = random_state(NormAlgo::Batch, c, 1, rng);
        LayerPassport lp;
        lp.mode = PrecedentKind::Conv;
        Tensor W, x;
        std::vector<int> targets(c);
        for (int attempt = 0; attempt < 50; ++attempt) {
            lp.p_gamma = Tensor::randn({2, 4, 4}, rng);
            lp.p_beta = Tensor::randn({2, 4, 4}, rng);
            W = Tensor::randn({c, 2, 3, 3}, rng, true);
            x = Tensor::randn({4, 2, 5, 5}, rng, true);
            for (auto& t : targets) t = rng.uniform() < 0.5 ? -1 : 1;

            NoGradGuard no_grad;
            double dist = 1e30;
            for (const Tensor& p : {lp.p_gamma, lp.p_beta}) {
                Tensor wp = transform_passport(W, p, lp.mode);
                for (const Tensor& w1 : {st.w1_gamma, st.w1_beta}) {
                    Tensor h = matmul(reshape(wp, {1, c}), w1);
                    for (float v : h.values()) dist = std::min(dist, double(std::abs(v)));
                }
                for (int i = 0; i < c; ++i)
                    dist = std::min(dist,
                                    double(std::abs(0.5f - targets[i] * wp.values()[i])));
            }
            auto probe = copy_state(st);
            auto [mu, sigma] = normalize_stats(conv2d(x, W, 1, 1), probe.kind, true, probe,
                                               BranchMode::PassportAware);
            double min_sigma = 1e30;
            for (float v : sigma.values()) min_sigma = std::min(min_sigma, double(v));
            if (dist > kink_margin && min_sigma > 0.8) break;
        }
        const std::vector<int> labels = {0, 1, 2, 3};

        auto layer_loss = [&](const Tensor& weight, const Tensor& input) {
            auto fresh = copy_state(st);
            Tensor z = conv2d(input, weight, 1, 1);
            Tensor y = forward_passport_aware(z, fresh, lp, weight, true);
            Tensor task = cross_entropy(global_avg_pool(y), labels);
            Tensor wp_g = transform_passport(weight, lp.p_gamma, lp.mode);
            Tensor hinge = signature_hinge_loss(wp_g, targets, 0.5f);
            return add(task, mul_scalar(hinge, 0.05f));
        };
        out.emplace_back("layer_loss_w_conv",
                         grad_check([&](Tensor& t) { return layer_loss(t, x); }, W, eps_c));
        out.emplace_back("layer_loss_x_conv",
                         grad_check([&](Tensor& t) { return layer_loss(W, t); }, x, eps_c));
    }

    return out;
}

}  // namespace passnorm
