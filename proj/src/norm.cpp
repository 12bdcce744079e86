// SPDX-License-Identifier: Apache-2.0

#include "passnorm/norm.hpp"

#include <cmath>
#include <string>

#include "passnorm/ops.hpp"

namespace passnorm {
namespace {

void check_layout(const Tensor& x, const PassportNormState& state) {
    if (x.dim() != 2 && x.dim() != 4)
        throw DimensionError("normalization expects (N,C) or (N,C,H,W) input");
    if (x.shape()[1] != state.channels)
        throw DimensionError("normalization: input has " + std::to_string(x.shape()[1]) +
                             " channels, layer has " + std::to_string(state.channels));
}

std::vector<int> channel_bcast_shape(int rank, int channels) {
    if (rank == 2) return {1, channels};
    return {1, channels, 1, 1};
}

std::vector<int> stat_axes(NormAlgo algo, int rank) {
    switch (algo) {
        case NormAlgo::Batch: return rank == 2 ? std::vector<int>{0} : std::vector<int>{0, 2, 3};
        case NormAlgo::Instance:
            if (rank != 4) throw DimensionError("instance norm requires (N,C,H,W) input");
            return {2, 3};
        case NormAlgo::Layer: return rank == 2 ? std::vector<int>{1} : std::vector<int>{1, 2, 3};
        case NormAlgo::Group: break;
    }
    throw UsageError("group norm statistics are computed in the grouped view");
}

// Copies a (C)-shaped buffer into a broadcastable constant.
Tensor channel_constant(const Tensor& buf, int rank) {
    std::vector<float> vals(buf.values().begin(), buf.values().end());
    return Tensor::from_data(channel_bcast_shape(rank, buf.shape()[0]), std::move(vals));
}

Tensor flatten_channel_stat(const Tensor& stat, int channels) {
    std::vector<float> vals(stat.values().begin(), stat.values().end());
    if (static_cast<int>(vals.size()) != channels)
        throw DimensionError("per-channel statistic has wrong length");
    return Tensor::from_data({channels}, std::move(vals));
}

struct BranchBuffers {
    Tensor* mu;
    Tensor* var;
    bool* init;
};

BranchBuffers branch_buffers(PassportNormState& state, BranchMode branch) {
    if (branch == BranchMode::PassportFree)
        return {&state.running_mu0, &state.running_var0, &state.init0};
    return {&state.running_mu1, &state.running_var1, &state.init1};
}

Tensor apply_channel_affine(const Tensor& xhat, const Tensor& gamma, const Tensor& beta) {
    const auto bshape = channel_bcast_shape(xhat.dim(), gamma.shape()[0]);
    return add(mul(xhat, reshape(gamma, bshape)), reshape(beta, bshape));
}

// Differentiable (x - mu)/sigma with batch statistics over `axes`.
// Updates the branch running buffers when asked.
Tensor batch_normalized(const Tensor& x, const std::vector<int>& axes, float eps,
                        PassportNormState* update_state, BranchMode update_branch,
                        int channels) {
    Tensor mu = mean(x, axes, /*keepdims=*/true);
    Tensor centered = sub(x, mu);
    Tensor var = mean(mul(centered, centered), axes, /*keepdims=*/true);
    if (update_state) {
        update_running_stats(*update_state, update_branch,
                             flatten_channel_stat(mu.detach(), channels),
                             flatten_channel_stat(var.detach(), channels));
    }
    return divide(centered, passnorm::sqrt(add_scalar(var, eps)));
}

Tensor onthefly_normalized(const Tensor& x, const NormKind& kind) {
    if (kind.algo == NormAlgo::Group) {
        const int n = x.shape()[0];
        const int c = x.shape()[1];
        if (kind.groups < 1 || c % kind.groups != 0)
            throw UsageError("group norm: groups must divide the channel count");
        int inner = c / kind.groups;
        for (int d = 2; d < x.dim(); ++d) inner *= x.shape()[d];
        Tensor grouped = reshape(x, {n, kind.groups, inner});
        Tensor mu = mean(grouped, {2}, true);
        Tensor centered = sub(grouped, mu);
        Tensor var = mean(mul(centered, centered), {2}, true);
        Tensor xhat = divide(centered, passnorm::sqrt(add_scalar(var, kind.eps)));
        return reshape(xhat, x.shape());
    }
    const auto axes = stat_axes(kind.algo, x.dim());
    Tensor mu = mean(x, axes, true);
    Tensor centered = sub(x, mu);
    Tensor var = mean(mul(centered, centered), axes, true);
    return divide(centered, passnorm::sqrt(add_scalar(var, kind.eps)));
}

}  // namespace

void update_running_stats(PassportNormState& state, BranchMode branch, const Tensor& batch_mu,
                          const Tensor& batch_var) {
    if (state.kind.algo != NormAlgo::Batch)
        throw UsageError("update_running_stats: only batch normalization keeps running statistics");
    auto buf = branch_buffers(state, branch);
    if (!buf.mu->defined())
        throw UsageError("update_running_stats: branch buffers absent");
    if (batch_mu.numel() != state.channels || batch_var.numel() != state.channels)
        throw DimensionError("update_running_stats: statistics must be per-channel");

    const double m = static_cast<double>(state.momentum);
    auto rm = buf.mu->values_mut();
    auto rv = buf.var->values_mut();
    auto bm = batch_mu.values();
    auto bv = batch_var.values();
    for (int c = 0; c < state.channels; ++c) {
        rm[c] = static_cast<float>((1.0 - m) * rm[c] + m * bm[c]);
        rv[c] = static_cast<float>((1.0 - m) * rv[c] + m * bv[c]);
    }
    *buf.init = true;
}

Tensor normalize_pre_affine(const Tensor& x, PassportNormState& state, BranchMode branch,
                            bool training, bool shared_stats) {
    check_layout(x, state);
    const NormKind& kind = state.kind;
    if (kind.algo != NormAlgo::Batch) return onthefly_normalized(x, kind);

    const BranchMode effective = shared_stats ? BranchMode::PassportFree : branch;
    if (training) {
        return batch_normalized(x, stat_axes(kind.algo, x.dim()), kind.eps,
                                training ? &state : nullptr, effective, state.channels);
    }
    auto buf = branch_buffers(state, effective);
    if (!buf.mu->defined() || !*buf.init)
        throw UninitializedStatsError(
            "batch norm inference before any running-statistics update");
    Tensor mu_c = channel_constant(*buf.mu, x.dim());
    std::vector<float> sig(buf.var->values().begin(), buf.var->values().end());
    for (auto& v : sig) v = std::sqrt(v + kind.eps);
    Tensor sigma_c = Tensor::from_data(channel_bcast_shape(x.dim(), state.channels), std::move(sig));
    return divide(sub(x, mu_c), sigma_c);
}

std::pair<Tensor, Tensor> normalize_stats(const Tensor& x, const NormKind& kind, bool training,
                                          PassportNormState& state, BranchMode branch) {
    check_layout(x, state);
    NoGradGuard no_grad;
    const int rank = x.dim();
    const int n = x.shape()[0];
    const int c = x.shape()[1];

    if (kind.algo == NormAlgo::Batch) {
        if (training) {
            const auto axes = stat_axes(kind.algo, rank);
            Tensor mu = mean(x, axes, true);
            Tensor centered = sub(x, mu);
            Tensor var = mean(mul(centered, centered), axes, true);
            update_running_stats(state, branch, flatten_channel_stat(mu, c),
                                 flatten_channel_stat(var, c));
            return {mu, passnorm::sqrt(add_scalar(var, kind.eps))};
        }
        auto buf = branch_buffers(state, branch);
        if (!buf.mu->defined() || !*buf.init)
            throw UninitializedStatsError(
                "batch norm inference before any running-statistics update");
        Tensor mu_c = channel_constant(*buf.mu, rank);
        std::vector<float> sig(buf.var->values().begin(), buf.var->values().end());
        for (auto& v : sig) v = std::sqrt(v + kind.eps);
        return {mu_c, Tensor::from_data(channel_bcast_shape(rank, c), std::move(sig))};
    }

    if (kind.algo == NormAlgo::Group) {
        if (kind.groups < 1 || c % kind.groups != 0)
            throw UsageError("group norm: groups must divide the channel count");
        int inner = c / kind.groups;
        for (int d = 2; d < rank; ++d) inner *= x.shape()[d];
        Tensor grouped = reshape(x, {n, kind.groups, inner});
        Tensor mu = mean(grouped, {2}, true);
        Tensor centered = sub(grouped, mu);
        Tensor var = mean(mul(centered, centered), {2}, true);

        // Expand per-group values to per-channel broadcast shape.
        const int per_group = c / kind.groups;
        std::vector<float> mu_e(static_cast<std::size_t>(n) * c), sig_e(static_cast<std::size_t>(n) * c);
        auto mv = mu.values();
        auto vv = var.values();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                const std::size_t g = static_cast<std::size_t>(i) * kind.groups + j / per_group;
                mu_e[static_cast<std::size_t>(i) * c + j] = mv[g];
                sig_e[static_cast<std::size_t>(i) * c + j] = std::sqrt(vv[g] + kind.eps);
            }
        std::vector<int> shape = rank == 2 ? std::vector<int>{n, c} : std::vector<int>{n, c, 1, 1};
        return {Tensor::from_data(shape, std::move(mu_e)), Tensor::from_data(shape, std::move(sig_e))};
    }

    const auto axes = stat_axes(kind.algo, rank);
    Tensor mu = mean(x, axes, true);
    Tensor centered = sub(x, mu);
    Tensor var = mean(mul(centered, centered), axes, true);
    return {mu, passnorm::sqrt(add_scalar(var, kind.eps))};
}

Tensor forward_passport_free(const Tensor& x, PassportNormState& state, bool training) {
    if (!state.gamma0.defined() || !state.beta0.defined())
        throw UsageError("forward_passport_free: affine parameters not initialized");
    Tensor xhat = normalize_pre_affine(x, state, BranchMode::PassportFree, training);
    return apply_channel_affine(xhat, state.gamma0, state.beta0);
}

Tensor forward_passport_aware(const Tensor& x, PassportNormState& state,
                              const LayerPassport& passport, const Tensor& W_c, bool training,
                              float pipeline_slope) {
    if (!state.w1_gamma.defined() || !state.w2_gamma.defined() || !state.w1_beta.defined() ||
        !state.w2_beta.defined())
        throw UsageError("forward_passport_aware: passport-branch parameters absent");
    Tensor wp_g = transform_passport(W_c, passport.p_gamma, passport.mode);
    Tensor wp_b = transform_passport(W_c, passport.p_beta, passport.mode);
    Tensor gamma1 = affine_from_passport(wp_g, state.w1_gamma, state.w2_gamma, pipeline_slope);
    Tensor beta1 = affine_from_passport(wp_b, state.w1_beta, state.w2_beta, pipeline_slope);
    Tensor xhat = normalize_pre_affine(x, state, BranchMode::PassportAware, training);
    return apply_channel_affine(xhat, gamma1, beta1);
}

Tensor forward_passport_direct(const Tensor& x, PassportNormState& state,
                               const LayerPassport& passport, const Tensor& W_c, bool training,
                               bool shared_stats) {
    Tensor wp_g = transform_passport(W_c, passport.p_gamma, passport.mode);
    Tensor wp_b = transform_passport(W_c, passport.p_beta, passport.mode);
    Tensor xhat = normalize_pre_affine(x, state, BranchMode::PassportAware, training, shared_stats);
    return apply_channel_affine(xhat, wp_g, wp_b);
}

Tensor forward_passport_baseline(const Tensor& x, PassportNormState& state,
                                 const LayerPassport& passport, const Tensor& W_c, bool training) {
    Tensor wp_g = transform_passport(W_c, passport.p_gamma, passport.mode);
    Tensor wp_b = transform_passport(W_c, passport.p_beta, passport.mode);
    auto [mu, sigma] = normalize_stats(x, state.kind, training, state, BranchMode::PassportFree);
    Tensor xhat = divide(sub(x, mu), sigma);
    return apply_channel_affine(xhat, wp_g, wp_b);
}

}  // namespace passnorm
