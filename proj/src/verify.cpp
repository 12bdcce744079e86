// SPDX-License-Identifier: Apache-2.0

#include "passnorm/verify.hpp"

#include <string>

#include "passnorm/ops.hpp"

namespace passnorm {
namespace {

const ModelLayer& enabled_layer(const Model& m, int norm_id) {
    for (const auto& layer : m.layers)
        if (layer.def.has_norm && layer.norm_id == norm_id) return layer;
    throw KeystoreError("model has no norm layer with id " + std::to_string(norm_id));
}

}  // namespace

Signature extract_model_signature(const Model& m, const PassportBundle& passports) {
    NoGradGuard no_grad;
    Signature sig;
    for (const auto& lp : passports.layers) {
        const auto& layer = enabled_layer(m, lp.layer_id);
        Tensor wp_g = transform_passport(layer.weight, lp.p_gamma, lp.mode);
        Tensor wp_b = transform_passport(layer.weight, lp.p_beta, lp.mode);
        LayerSignature ls;
        ls.gamma_bits = extract_signature(wp_g);
        ls.beta_bits = extract_signature(wp_b);
        sig.push_back(std::move(ls));
    }
    return sig;
}

std::pair<std::vector<std::uint8_t>, double> detect_signature(
    const Model& m, const PassportBundle& passports, const std::vector<SignTargets>& expected) {
    if (expected.size() != passports.layers.size())
        throw UsageError("detect_signature: expected " + std::to_string(passports.layers.size()) +
                         " target layers, got " + std::to_string(expected.size()));
    const Signature sig = extract_model_signature(m, passports);

    std::vector<std::uint8_t> layer_match;
    std::size_t matched = 0, total = 0;
    for (std::size_t l = 0; l < sig.size(); ++l) {
        const auto want_g = bits_from_signs(expected[l].gamma);
        const auto want_b = bits_from_signs(expected[l].beta);
        if (want_g.size() != sig[l].gamma_bits.size() || want_b.size() != sig[l].beta_bits.size())
            throw UsageError("detect_signature: target length mismatch at layer " +
                             std::to_string(passports.layers[l].layer_id));
        bool exact = true;
        for (std::size_t i = 0; i < want_g.size(); ++i) {
            total += 1;
            if (sig[l].gamma_bits[i] == want_g[i]) ++matched; else exact = false;
        }
        for (std::size_t i = 0; i < want_b.size(); ++i) {
            total += 1;
            if (sig[l].beta_bits[i] == want_b[i]) ++matched; else exact = false;
        }
        layer_match.push_back(exact ? 1 : 0);
    }
    return {layer_match, total ? static_cast<double>(matched) / total : 0.0};
}

VerificationReport fidelity_verify(Model& m, const PassportBundle& passports, const Dataset& d,
                                   int k_forgeries, std::uint64_t seed) {
    if (k_forgeries < 0) throw UsageError("fidelity_verify: k_forgeries must be >= 0");

    VerificationReport rep;
    rep.acc_deploy = evaluate_accuracy(m, d, BranchMode::PassportFree, nullptr);
    rep.acc_correct = evaluate_accuracy(m, d, BranchMode::PassportAware, &passports);
    rep.k_forgeries = k_forgeries;

    if (k_forgeries > 0) {
        std::vector<PassportLayerInfo> infos;
        for (std::size_t i = 0; i < passports.layers.size(); ++i) {
            PassportLayerInfo info;
            info.layer_id = passports.layers[i].layer_id;
            info.mode = passports.layers[i].mode;
            info.input_shape = passports.layers[i].p_gamma.shape();
            info.channels = static_cast<int>(passports.target_signs[i].gamma.size());
            infos.push_back(std::move(info));
        }
        double acc_sum = 0.0;
        for (int k = 0; k < k_forgeries; ++k) {
            std::uint64_t mix = seed ^ fnv1a64("forge/" + std::to_string(k));
            PassportBundle forged =
                generate_passports(infos, "forged#" + std::to_string(k), splitmix64(mix));
            acc_sum += evaluate_accuracy(m, d, BranchMode::PassportAware, &forged);
        }
        rep.acc_forged_mean = acc_sum / k_forgeries;
    }

    auto [layer_match, bit_rate] = detect_signature(m, passports, passports.target_signs);
    rep.layer_match = std::move(layer_match);
    rep.bit_rate = bit_rate;
    return rep;
}

double blackbox_verify(const std::function<int(const Tensor&)>& predict,
                       const TriggerSet& trigger) {
    const int n = trigger.size();
    if (n == 0) throw UsageError("blackbox_verify: empty trigger set");
    int correct = 0;
    for (int i = 0; i < n; ++i) {
        Tensor sample = gather_rows(trigger.X, {i});
        // Drop the leading batch axis: the predictor sees one sample.
        std::vector<int> sshape(trigger.X.shape().begin() + 1, trigger.X.shape().end());
        sample = reshape(sample, sshape);
        if (predict(sample) == trigger.y[i]) ++correct;
    }
    return static_cast<double>(correct) / n;
}

std::function<int(const Tensor&)> model_predictor(Model& m) {
    return [&m](const Tensor& sample) {
        NoGradGuard no_grad;
        std::vector<int> bshape = {1};
        bshape.insert(bshape.end(), sample.shape().begin(), sample.shape().end());
        Tensor batch = reshape(sample, bshape);
        return argmax_rows(forward(m, batch, BranchMode::PassportFree, nullptr,
                                   /*training=*/false))[0];
    };
}

}  // namespace passnorm
