// SPDX-License-Identifier: Apache-2.0

#include "passnorm/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "passnorm/ops.hpp"
#include "passnorm/train.hpp"

namespace passnorm {
namespace {

void clear_all_grads(Model& m) {
    for (auto& [name, t] : named_tensors(m)) {
        (void)name;
        Tensor handle = t;
        handle.clear_grad();
    }
}

std::vector<int> sample_batch(Rng& rng, int dataset_size, int batch) {
    std::vector<int> idx(static_cast<std::size_t>(std::min(batch, dataset_size)));
    for (auto& v : idx) v = static_cast<int>(rng.below(dataset_size));
    return idx;
}

std::vector<Tensor> passport_params(PassportBundle& bundle) {
    std::vector<Tensor> params;
    for (auto& lp : bundle.layers) {
        lp.p_gamma.set_requires_grad(true);
        lp.p_beta.set_requires_grad(true);
        params.push_back(lp.p_gamma);
        params.push_back(lp.p_beta);
    }
    return params;
}

PassportBundle copy_bundle(const PassportBundle& src) {
    PassportBundle out;
    out.owner_id = src.owner_id;
    out.creation_seed = src.creation_seed;
    out.target_signs = src.target_signs;
    for (const auto& lp : src.layers) {
        LayerPassport c;
        c.layer_id = lp.layer_id;
        c.mode = lp.mode;
        c.p_gamma = lp.p_gamma.detach();
        c.p_beta = lp.p_beta.detach();
        out.layers.push_back(std::move(c));
    }
    return out;
}

// Hinge against arbitrary targets, differentiable in the bundle's passports.
Tensor hinge_on_bundle(Model& m, const PassportBundle& bundle,
                       const std::vector<SignTargets>& targets, float alpha0) {
    Tensor total = Tensor::scalar(0.0f);
    for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
        const auto& lp = bundle.layers[l];
        const ModelLayer* layer = nullptr;
        for (const auto& cand : m.layers)
            if (cand.def.has_norm && cand.norm_id == lp.layer_id) layer = &cand;
        if (!layer) throw KeystoreError("bundle layer id not present in model");
        Tensor wp_g = transform_passport(layer->weight, lp.p_gamma, lp.mode);
        Tensor wp_b = transform_passport(layer->weight, lp.p_beta, lp.mode);
        total = add(total, signature_hinge_loss(wp_g, targets[l].gamma, alpha0));
        total = add(total, signature_hinge_loss(wp_b, targets[l].beta, alpha0));
    }
    return total;
}

}  // namespace

std::pair<Model, AttackReport> finetune_attack(const Model& deployed, const Dataset& new_train,
                                               const Dataset& new_eval, int epochs, float lr,
                                               const PassportBundle& owner, std::uint64_t seed) {
    Model victim = clone_model(deployed);
    // The attacker trains a plain model; the passport machinery is not theirs.
    for (auto& layer : victim.layers) layer.passport_enabled = false;

    if (new_train.num_classes != victim.spec.num_classes) {
        auto& head = victim.layers.back();
        if (head.def.op != LayerDef::Op::FC || head.def.has_norm)
            throw UsageError("finetune_attack: model head is not a plain FC classifier");
        const int in_d = head.weight.shape()[0];
        Rng rng = stream_for(seed, "finetune/head");
        const float bound = std::sqrt(6.0f / static_cast<float>(in_d));
        head.weight = Tensor::rand_uniform({in_d, new_train.num_classes}, -bound, bound, rng, true);
        head.bias = Tensor::zeros({new_train.num_classes}, true);
        head.def.out_channels = new_train.num_classes;
        victim.spec.num_classes = new_train.num_classes;
        victim.spec.layers.back().out_channels = new_train.num_classes;
    }

    AttackReport rep;
    rep.kind = "finetune";
    rep.pre_task_acc = evaluate_accuracy(victim, new_eval, BranchMode::PassportFree, nullptr);

    TrainConfig cfg;
    cfg.lambda1 = 0.0f;
    cfg.lambda2 = 0.0f;
    cfg.lr = lr;
    cfg.epochs = epochs;
    cfg.seed = seed;
    train(victim, new_train, nullptr, nullptr, cfg);

    rep.post_task_acc = evaluate_accuracy(victim, new_eval, BranchMode::PassportFree, nullptr);
    auto [layer_match, bit_rate] = detect_signature(victim, owner, owner.target_signs);
    std::size_t detected = 0;
    for (auto v : layer_match) detected += v;
    rep.layer_detection = layer_match.empty()
                              ? 0.0
                              : static_cast<double>(detected) / layer_match.size();
    rep.bit_detection = bit_rate;
    rep.params["epochs"] = epochs;
    rep.params["lr"] = lr;
    rep.params["seed"] = static_cast<double>(seed);
    return {std::move(victim), rep};
}

std::pair<Model, AttackReport> prune_attack(const Model& m, double rate) {
    if (rate < 0.0 || rate > 1.0) throw UsageError("prune_attack: rate must lie in [0,1]");
    Model pruned = clone_model(m);

    struct Entry {
        float mag;
        int tensor;
        std::int64_t elem;
    };
    std::vector<Tensor> kernels;
    for (auto& layer : pruned.layers) kernels.push_back(layer.weight);

    std::vector<Entry> entries;
    for (std::size_t t = 0; t < kernels.size(); ++t) {
        const auto v = kernels[t].values();
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(v.size()); ++i)
            entries.push_back({std::abs(v[i]), static_cast<int>(t), i});
    }
    const std::size_t total = entries.size();
    const std::size_t kill = static_cast<std::size_t>(
        std::ceil(rate * static_cast<double>(total) - 1e-12));
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        if (a.mag != b.mag) return a.mag < b.mag;
        if (a.tensor != b.tensor) return a.tensor < b.tensor;
        return a.elem < b.elem;
    });
    for (std::size_t i = 0; i < kill && i < total; ++i)
        kernels[entries[i].tensor].values_mut()[entries[i].elem] = 0.0f;

    AttackReport rep;
    rep.kind = "prune";
    rep.params["rate"] = rate;
    rep.params["zeroed"] = static_cast<double>(std::min(kill, total));
    rep.params["prunable"] = static_cast<double>(total);
    return {std::move(pruned), rep};
}

std::vector<PruneSweepRow> prune_sweep(const Model& deployed, const BranchParams& branch,
                                       const PassportBundle& owner, Dataset& eval_data,
                                       const std::vector<double>& rates) {
    std::vector<PruneSweepRow> rows;
    for (double rate : rates) {
        auto [pruned, rep] = prune_attack(deployed, rate);
        Model verification = attach_branch(pruned, branch, owner);
        PruneSweepRow row;
        row.rate = rate;
        row.verify_acc =
            evaluate_accuracy(verification, eval_data, BranchMode::PassportAware, &owner);
        auto [layer_match, bit_rate] = detect_signature(verification, owner, owner.target_signs);
        std::size_t detected = 0;
        for (auto v : layer_match) detected += v;
        row.bit_detection = bit_rate;
        row.layer_detection =
            layer_match.empty() ? 0.0 : static_cast<double>(detected) / layer_match.size();
        rows.push_back(row);
    }
    return rows;
}

AttackReport ambiguity_attack_forge(Model& verification_model, const Dataset& opt_data,
                                    Dataset& eval_data, int num_trials, int steps, float lr,
                                    std::uint64_t seed) {
    if (num_trials < 1) throw UsageError("ambiguity_attack_forge: num_trials must be >= 1");
    auto infos = passport_layer_infos(verification_model.spec);

    double init_sum = 0.0, opt_sum = 0.0;
    for (int trial = 0; trial < num_trials; ++trial) {
        std::uint64_t mix = seed ^ fnv1a64("ambiguity1/" + std::to_string(trial));
        PassportBundle fake =
            generate_passports(infos, "attacker#" + std::to_string(trial), splitmix64(mix));
        init_sum += evaluate_accuracy(verification_model, eval_data, BranchMode::PassportAware, &fake);

        auto params = passport_params(fake);
        Rng batch_rng = stream_for(seed, "ambiguity1/batches/" + std::to_string(trial));
        for (int s = 0; s < steps; ++s) {
            const auto idx = sample_batch(batch_rng, opt_data.size(), 32);
            Tensor bx = gather_rows(opt_data.X, idx);
            const auto by = gather_labels(opt_data.y, idx);
            Tensor loss = cross_entropy(
                forward(verification_model, bx, BranchMode::PassportAware, &fake,
                        /*training=*/false),
                by);
            backward(loss);
            sgd_step(params, lr);
        }
        opt_sum += evaluate_accuracy(verification_model, eval_data, BranchMode::PassportAware, &fake);
    }
    clear_all_grads(verification_model);

    AttackReport rep;
    rep.kind = "ambiguity1";
    rep.acc_initial_mean = init_sum / num_trials;
    rep.acc_optimized_mean = opt_sum / num_trials;
    rep.params["trials"] = num_trials;
    rep.params["steps"] = steps;
    rep.params["lr"] = lr;
    rep.params["seed"] = static_cast<double>(seed);
    rep.params["chance"] = 1.0 / eval_data.num_classes;
    return rep;
}

AttackReport ambiguity_attack_flip(Model& verification_model, const PassportBundle& owner,
                                   double flip_fraction, const Dataset& opt_data,
                                   Dataset& eval_data, int steps, float lr, std::uint64_t seed,
                                   float alpha0, float lambda_flip) {
    if (flip_fraction < 0.0 || flip_fraction > 1.0)
        throw UsageError("ambiguity_attack_flip: flip_fraction must lie in [0,1]");

    PassportBundle stolen = copy_bundle(owner);
    auto params = passport_params(stolen);

    // Flip ceil(f * total) uniformly chosen signature positions.
    struct Pos {
        std::size_t layer;
        int pipeline;  // 0 gamma, 1 beta
        std::size_t chan;
    };
    std::vector<Pos> positions;
    for (std::size_t l = 0; l < stolen.target_signs.size(); ++l) {
        for (std::size_t c = 0; c < stolen.target_signs[l].gamma.size(); ++c)
            positions.push_back({l, 0, c});
        for (std::size_t c = 0; c < stolen.target_signs[l].beta.size(); ++c)
            positions.push_back({l, 1, c});
    }
    const std::size_t total = positions.size();
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(flip_fraction * static_cast<double>(total) - 1e-12));
    Rng pick = stream_for(seed, "ambiguity2/flips");
    for (std::size_t i = 0; i < k && i < total; ++i) {
        const std::size_t j = i + pick.below(total - i);
        std::swap(positions[i], positions[j]);
    }
    std::vector<SignTargets> flipped = owner.target_signs;
    for (std::size_t i = 0; i < k && i < total; ++i) {
        const Pos& p = positions[i];
        auto& vec = p.pipeline == 0 ? flipped[p.layer].gamma : flipped[p.layer].beta;
        vec[p.chan] = -vec[p.chan];
    }

    Rng batch_rng = stream_for(seed, "ambiguity2/batches");
    for (int s = 0; s < steps; ++s) {
        const auto idx = sample_batch(batch_rng, opt_data.size(), 32);
        Tensor bx = gather_rows(opt_data.X, idx);
        const auto by = gather_labels(opt_data.y, idx);
        Tensor task = cross_entropy(
            forward(verification_model, bx, BranchMode::PassportAware, &stolen,
                    /*training=*/false),
            by);
        Tensor dissim = hinge_on_bundle(verification_model, stolen, flipped, alpha0);
        Tensor loss = add(task, mul_scalar(dissim, lambda_flip));
        backward(loss);
        sgd_step(params, lr);
    }
    clear_all_grads(verification_model);

    AttackReport rep;
    rep.kind = "ambiguity2";
    rep.flip_fraction = flip_fraction;
    rep.post_task_acc =
        evaluate_accuracy(verification_model, eval_data, BranchMode::PassportAware, &stolen);

    // How many of the selected flips the attacker actually realized.
    const Signature sig = extract_model_signature(verification_model, stolen);
    std::size_t realized = 0;
    for (std::size_t i = 0; i < k && i < total; ++i) {
        const Pos& p = positions[i];
        const auto& bits = p.pipeline == 0 ? sig[p.layer].gamma_bits : sig[p.layer].beta_bits;
        const int want = p.pipeline == 0 ? flipped[p.layer].gamma[p.chan]
                                         : flipped[p.layer].beta[p.chan];
        if (bits[p.chan] == (want > 0 ? 1 : 0)) ++realized;
    }
    rep.flip_achieved = k == 0 ? 1.0 : static_cast<double>(realized) / k;
    rep.params["steps"] = steps;
    rep.params["lr"] = lr;
    rep.params["lambda_flip"] = lambda_flip;
    rep.params["alpha0"] = alpha0;
    rep.params["seed"] = static_cast<double>(seed);
    rep.params["flipped_bits"] = static_cast<double>(k);
    rep.params["total_bits"] = static_cast<double>(total);
    return rep;
}

}  // namespace passnorm
