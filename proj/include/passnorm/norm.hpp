// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <utility>

#include "passnorm/passport.hpp"
#include "passnorm/tensor.hpp"

namespace passnorm {

enum class NormAlgo { Batch, Group, Instance, Layer };

struct NormKind {
    NormAlgo algo = NormAlgo::Batch;
    int groups = 1;  // Group only; must divide the channel count
    float eps = 1e-5f;
};

// Which normalization branch a forward call runs through. Never mixed
// within a single call.
enum class BranchMode { PassportFree, PassportAware };

// Per-layer state of a passport-aware normalization layer.
//
// The passport-free side (gamma0/beta0 and, for BN, running_mu0/var0) is
// what end-users receive. The passport-aware side keeps its own BN running
// statistics (running_mu1/var1) and, in the learnable-affine configuration,
// the two bias-free FC pipelines (w1_*/w2_*) that map the transformed
// passport to the affine parameters. Exporting a deployment model drops
// exactly the branch tensors and nothing else.
struct PassportNormState {
    NormKind kind;
    int channels = 0;
    float momentum = 0.1f;

    Tensor gamma0, beta0;

    // BN running statistics, one pair per branch, updated disjointly.
    Tensor running_mu0, running_var0;
    bool init0 = false;
    Tensor running_mu1, running_var1;
    bool init1 = false;

    Tensor w1_gamma, w2_gamma, w1_beta, w2_beta;
};

// Detached (mu, sigma) shaped to broadcast against x; sigma = sqrt(var+eps).
// BN in training mode computes batch statistics and updates the selected
// branch's running buffers; BN in inference mode reads them (error if the
// branch was never updated). GN/IN/LN compute on the fly in both modes and
// are branch-independent.
std::pair<Tensor, Tensor> normalize_stats(const Tensor& x, const NormKind& kind, bool training,
                                          PassportNormState& state, BranchMode branch);

// running <- (1-momentum)*running + momentum*batch on the selected branch
// only. UsageError for non-BN kinds.
void update_running_stats(PassportNormState& state, BranchMode branch, const Tensor& batch_mu,
                          const Tensor& batch_var);

// Differentiable pre-affine normalization (x - mu)/sigma through the branch's
// statistics. shared_stats forces the passport-free buffers for both branches.
Tensor normalize_pre_affine(const Tensor& x, PassportNormState& state, BranchMode branch,
                            bool training, bool shared_stats = false);

// gamma0 * (x - mu0)/sigma0 + beta0
Tensor forward_passport_free(const Tensor& x, PassportNormState& state, bool training);

// Full passport branch: independent statistics, affine parameters produced
// by the learnable FC pipelines from the transformed passport.
Tensor forward_passport_aware(const Tensor& x, PassportNormState& state,
                              const LayerPassport& passport, const Tensor& W_c, bool training,
                              float pipeline_slope = kPipelineSlope);

// Passport branch with the transformed passport applied directly as the
// affine parameters (no learnable pipeline). shared_stats=false keeps
// independent branch statistics.
Tensor forward_passport_direct(const Tensor& x, PassportNormState& state,
                               const LayerPassport& passport, const Tensor& W_c, bool training,
                               bool shared_stats);

// Single-branch baseline: normalize with the shared statistics, no learnable
// affine, then scale/shift by the transformed passport. Independent route
// kept distinct from forward_passport_direct for cross-checking.
Tensor forward_passport_baseline(const Tensor& x, PassportNormState& state,
                                 const LayerPassport& passport, const Tensor& W_c, bool training);

}  // namespace passnorm
