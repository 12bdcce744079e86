// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "passnorm/tensor.hpp"

namespace passnorm {

// What kind of weighted layer precedes the normalization layer. It decides
// how the passport is transformed: convolution + global average pooling for
// Conv, a plain transposed product for FC.
enum class PrecedentKind { Conv, FC };

// Secret per-layer passport pair. Shapes match the precedent layer's input
// signature: (C_in,H,W) for conv-preceded layers, (C_in) for fc-preceded.
struct LayerPassport {
    Tensor p_gamma;
    Tensor p_beta;
    int layer_id = 0;  // index among the model's normalization layers
    PrecedentKind mode = PrecedentKind::Conv;
};

// Ground-truth signature signs in {-1,+1}, one per channel, for the gamma
// and beta pipelines of one layer.
struct SignTargets {
    std::vector<int> gamma;
    std::vector<int> beta;
};

// Extracted signature bits in {0,1} for one layer.
struct LayerSignature {
    std::vector<std::uint8_t> gamma_bits;
    std::vector<std::uint8_t> beta_bits;
};

using Signature = std::vector<LayerSignature>;

// Everything the owner keeps secret: passports, target signs, identity.
struct PassportBundle {
    std::vector<LayerPassport> layers;
    std::vector<SignTargets> target_signs;  // parallel to layers
    std::string owner_id;
    std::uint64_t creation_seed = 0;

    const LayerPassport* find(int layer_id) const;
    const SignTargets* find_targets(int layer_id) const;
    std::size_t total_bits() const;
};

// Shape information generation needs per passport-enabled layer.
struct PassportLayerInfo {
    int layer_id = 0;
    PrecedentKind mode = PrecedentKind::Conv;
    std::vector<int> input_shape;  // precedent layer's input signature
    int channels = 0;              // norm layer channel count
};

// Passports drawn i.i.d. standard normal from named streams under `seed`;
// target signs derived from SHA-256 of (owner_id, layer_id, pipeline,
// channel). Same (owner_id, seed) always reproduces the same bundle.
PassportBundle generate_passports(const std::vector<PassportLayerInfo>& layers,
                                  const std::string& owner_id, std::uint64_t seed);

// wp = GAP(conv2d(p, W_c, stride 1, pad 0)) for Conv, W_c^T p for FC.
// Output length equals the norm layer's channel count.
Tensor transform_passport(const Tensor& W_c, const Tensor& p, PrecedentKind mode);

// w2^T g(w1^T wp) with g = leaky_relu(., slope); bias-free throughout.
// w1: (C,C_h), w2: (C_h,C).
Tensor affine_from_passport(const Tensor& wp, const Tensor& w1, const Tensor& w2, float slope);

// bit i = 1 iff wp_i > 0 (exactly zero maps to 0).
std::vector<std::uint8_t> extract_signature(const Tensor& wp);

// sum_i max(alpha0 - target_i * wp_i, 0); zero iff every wp_i sits on its
// target side with margin >= alpha0.
Tensor signature_hinge_loss(const Tensor& wp, const std::vector<int>& target_signs, float alpha0);

// {-1,+1} -> {0,1}
std::vector<std::uint8_t> bits_from_signs(const std::vector<int>& signs);

// Affine-pipeline defaults. The bottleneck keeps a floor of 4 hidden units
// and the activation a slope of 0.2: with narrower bottlenecks or a near-zero
// slope, a pipeline whose hidden pre-activations all start negative emits
// near-zero affine parameters and its gradients are slope-attenuated, which
// deadlocks the passport branch at the small channel counts used here.
inline constexpr float kPipelineSlope = 0.2f;
inline int pipeline_hidden_width(int channels) { return std::max(4, channels / 4); }

}  // namespace passnorm
