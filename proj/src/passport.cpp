// SPDX-License-Identifier: Apache-2.0

#include "passnorm/passport.hpp"

#include <string>

#include "passnorm/hash.hpp"
#include "passnorm/ops.hpp"

namespace passnorm {

const LayerPassport* PassportBundle::find(int layer_id) const {
    for (const auto& l : layers)
        if (l.layer_id == layer_id) return &l;
    return nullptr;
}

const SignTargets* PassportBundle::find_targets(int layer_id) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].layer_id == layer_id) return &target_signs[i];
    return nullptr;
}

std::size_t PassportBundle::total_bits() const {
    std::size_t n = 0;
    for (const auto& t : target_signs) n += t.gamma.size() + t.beta.size();
    return n;
}

PassportBundle generate_passports(const std::vector<PassportLayerInfo>& layers,
                                  const std::string& owner_id, std::uint64_t seed) {
    if (layers.empty())
        throw UsageError("generate_passports: no passport-enabled layers");

    PassportBundle bundle;
    bundle.owner_id = owner_id;
    bundle.creation_seed = seed;
    for (const auto& info : layers) {
        LayerPassport lp;
        lp.layer_id = info.layer_id;
        lp.mode = info.mode;
        const std::string base = "passport/" + std::to_string(info.layer_id);
        Rng rg = stream_for(seed, base + "/gamma");
        Rng rb = stream_for(seed, base + "/beta");
        lp.p_gamma = Tensor::randn(info.input_shape, rg);
        lp.p_beta = Tensor::randn(info.input_shape, rb);

        SignTargets targets;
        targets.gamma.reserve(info.channels);
        targets.beta.reserve(info.channels);
        for (int c = 0; c < info.channels; ++c) {
            targets.gamma.push_back(target_sign(owner_id, info.layer_id, 0, c));
            targets.beta.push_back(target_sign(owner_id, info.layer_id, 1, c));
        }
        bundle.layers.push_back(std::move(lp));
        bundle.target_signs.push_back(std::move(targets));
    }
    return bundle;
}

Tensor transform_passport(const Tensor& W_c, const Tensor& p, PrecedentKind mode) {
    if (mode == PrecedentKind::FC) {
        if (W_c.dim() != 2 || p.dim() != 1 || p.shape()[0] != W_c.shape()[0])
            throw DimensionError("transform_passport: FC expects W_c (in,out) and p (in)");
        const int in = W_c.shape()[0];
        const int out = W_c.shape()[1];
        Tensor row = reshape(p, {1, in});
        return reshape(matmul(row, W_c), {out});
    }
    if (W_c.dim() != 4 || p.dim() != 3)
        throw DimensionError("transform_passport: Conv expects W_c (C_out,C_in,k,k) and p (C_in,H,W)");
    return global_avg_pool(conv2d(p, W_c, /*stride=*/1, /*padding=*/0));
}

Tensor affine_from_passport(const Tensor& wp, const Tensor& w1, const Tensor& w2, float slope) {
    if (wp.dim() != 1 || w1.dim() != 2 || w2.dim() != 2)
        throw DimensionError("affine_from_passport: expects wp (C), w1 (C,C_h), w2 (C_h,C)");
    const int c = wp.shape()[0];
    const int hidden = w1.shape()[1];
    if (w1.shape()[0] != c || w2.shape()[0] != hidden || w2.shape()[1] != c)
        throw DimensionError("affine_from_passport: shape mismatch between wp, w1, w2");
    Tensor h = matmul(reshape(wp, {1, c}), w1);  // (1,C_h)
    return reshape(matmul(leaky_relu(h, slope), w2), {c});
}

std::vector<std::uint8_t> extract_signature(const Tensor& wp) {
    std::vector<std::uint8_t> bits;
    bits.reserve(static_cast<std::size_t>(wp.numel()));
    for (float v : wp.values()) bits.push_back(v > 0.0f ? 1 : 0);
    return bits;
}

Tensor signature_hinge_loss(const Tensor& wp, const std::vector<int>& target_signs, float alpha0) {
    if (alpha0 <= 0.0f) throw UsageError("signature_hinge_loss: alpha0 must be positive");
    if (static_cast<std::size_t>(wp.numel()) != target_signs.size())
        throw DimensionError("signature_hinge_loss: wp length " + std::to_string(wp.numel()) +
                             " vs " + std::to_string(target_signs.size()) + " targets");
    std::vector<float> t(target_signs.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(target_signs[i]);
    Tensor targets = Tensor::from_data(wp.shape(), std::move(t));
    // max(alpha0 - t*wp, 0)
    return sum(relu(add_scalar(neg(mul(wp, targets)), alpha0)));
}

std::vector<std::uint8_t> bits_from_signs(const std::vector<int>& signs) {
    std::vector<std::uint8_t> bits;
    bits.reserve(signs.size());
    for (int s : signs) bits.push_back(s > 0 ? 1 : 0);
    return bits;
}

}  // namespace passnorm
