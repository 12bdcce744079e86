// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "passnorm/norm.hpp"
#include "passnorm/passport.hpp"
#include "passnorm/tensor.hpp"

namespace passnorm {

// Ablation configurations for the passport branch:
//   SharedDirect       (A): shared statistics, transformed passport applied
//                           directly as the affine parameters
//   IndependentDirect  (B): independent branch statistics, direct affine
//   Full               (C): independent statistics + learnable affine pipelines
enum class AblationConfig { SharedDirect, IndependentDirect, Full };

std::string to_string(AblationConfig c);                 // "A" | "B" | "C"
AblationConfig ablation_from_string(const std::string&);

struct LayerDef {
    enum class Op { Conv, FC } op = Op::FC;
    int out_channels = 0;
    int kernel = 3, stride = 1, pad = 1;  // conv only
    bool has_norm = false;
    bool act = false;           // leaky relu after norm
    bool pool = false;          // 2x2/2 average pool after activation (conv)
    bool global_pool = false;   // global average pool after activation (conv)
    bool bias = false;          // fc head
};

struct ModelSpec {
    std::vector<LayerDef> layers;
    NormKind norm;
    std::vector<bool> passport_mask;  // one entry per norm layer, in order
    int num_classes = 0;
    std::vector<int> input_shape;  // {D} for fc models, {C,H,W} for conv models
    float momentum = 0.1f;
};

// input -> 64 -> 32 -> classes, normalization after each hidden FC layer.
ModelSpec toy_mlp_spec(int input_dim, int num_classes, NormKind kind);
// 3x3 convs 8 -> 16 -> 32 with normalization after each, one 2x2 pool,
// global-average-pool head, final FC classifier.
ModelSpec toy_cnn_spec(int in_channels, int num_classes, NormKind kind);

void validate_spec(const ModelSpec& spec);  // throws SpecError

struct ModelLayer {
    LayerDef def;
    Tensor weight;  // conv: (out,in,k,k); fc: (in,out)
    Tensor bias;    // defined iff def.bias
    PassportNormState norm;  // meaningful iff def.has_norm
    int norm_id = -1;        // index among norm layers, -1 if none
    bool passport_enabled = false;
    bool has_branch = false;  // branch tensors present for this layer
};

struct Model {
    ModelSpec spec;
    AblationConfig config = AblationConfig::Full;
    std::uint64_t build_seed = 0;
    std::vector<ModelLayer> layers;
};

// Parameters initialized from per-tensor streams under `seed`, so two builds
// with the same seed are identical and masked/unmasked builds share every
// non-branch tensor.
Model build_model(const ModelSpec& spec, AblationConfig config, std::uint64_t seed);

// Logits over classes. The passport-aware branch routes every enabled norm
// layer through its passport using the layer's own weight tensor; passports
// are required whenever an enabled layer exists.
Tensor forward(Model& m, const Tensor& x, BranchMode branch, const PassportBundle* passports,
               bool training);

// Deep copy (independent tensors and flags).
Model clone_model(const Model& m);

// Strips every passport-branch tensor; passport-free behavior is bit-identical.
Model export_deployment(const Model& m);

struct BranchLayerParams {
    int layer_id = 0;  // norm-layer index
    Tensor w1_gamma, w2_gamma, w1_beta, w2_beta;  // Full config
    Tensor running_mu1, running_var1;             // BN with independent stats
    bool init1 = false;
};

struct BranchParams {
    AblationConfig config = AblationConfig::Full;
    std::vector<BranchLayerParams> layers;
};

// The owner-kept side of the model, for the keystore.
BranchParams collect_branch(const Model& m);

// Reconstitutes a verification model; inverse of export_deployment +
// collect_branch. KeystoreError on layer mismatch.
Model attach_branch(const Model& deployed, const BranchParams& branch,
                    const PassportBundle& passports);

// Generation inputs for every passport-enabled layer of the spec.
std::vector<PassportLayerInfo> passport_layer_infos(const ModelSpec& spec);

// Named views of every tensor in the model, serialization order.
// Branch tensors carry ".branch." in their names.
std::vector<std::pair<std::string, Tensor>> named_tensors(const Model& m);

// Trainable parameters for one branch's training step. Shared weights and
// biases always train; gamma0/beta0 of enabled layers only on passport-free
// steps; pipeline weights of enabled layers only on passport-aware steps.
std::vector<Tensor> trainable_params(const Model& m, BranchMode branch);

}  // namespace passnorm
