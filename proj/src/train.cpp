// SPDX-License-Identifier: Apache-2.0

#include "passnorm/train.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

#include "passnorm/ops.hpp"

namespace passnorm {
namespace {

std::vector<int> shuffled_indices(int n, Rng& rng) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

bool has_enabled_layer(const Model& m) {
    for (const auto& layer : m.layers)
        if (layer.def.has_norm && layer.passport_enabled) return true;
    return false;
}

// Hinge over every enabled layer, built on the current graph so gradients
// reach both the passports' transform path and the pipeline inputs.
Tensor hinge_term(const Model& m, const PassportBundle& passports, float alpha0) {
    Tensor total = Tensor::scalar(0.0f);
    for (const auto& layer : m.layers) {
        if (!layer.def.has_norm || !layer.passport_enabled) continue;
        const LayerPassport* lp = passports.find(layer.norm_id);
        const SignTargets* targets = passports.find_targets(layer.norm_id);
        if (!lp || !targets)
            throw KeystoreError("no passport for norm layer " + std::to_string(layer.norm_id));
        Tensor wp_g = transform_passport(layer.weight, lp->p_gamma, lp->mode);
        Tensor wp_b = transform_passport(layer.weight, lp->p_beta, lp->mode);
        total = add(total, signature_hinge_loss(wp_g, targets->gamma, alpha0));
        total = add(total, signature_hinge_loss(wp_b, targets->beta, alpha0));
    }
    return total;
}

void validate_config(const TrainConfig& cfg) {
    if (cfg.lambda1 < 0.0f || cfg.lambda2 < 0.0f)
        throw UsageError("train: loss weights must be non-negative");
    if (cfg.passport_ratio <= 0.0f || cfg.passport_ratio > 1.0f)
        throw UsageError("train: passport_ratio must lie in (0,1]");
    if (cfg.epochs < 0) throw UsageError("train: epochs must be non-negative");
    if (cfg.batch_size < 1) throw UsageError("train: batch_size must be positive");
    if (cfg.alpha0 <= 0.0f) throw UsageError("train: alpha0 must be positive");
}

std::vector<Tensor> dedupe(std::vector<Tensor> params) {
    std::unordered_set<const void*> seen;
    std::vector<Tensor> out;
    for (auto& p : params)
        if (seen.insert(p.impl().get()).second) out.push_back(p);
    return out;
}

}  // namespace

TriggerSet make_trigger_set(int n, const std::vector<int>& input_shape, int num_classes,
                            std::uint64_t seed) {
    if (n < 1) throw UsageError("make_trigger_set: n must be >= 1");
    if (num_classes < 2) throw UsageError("make_trigger_set: need at least two classes");

    std::vector<int> shape = {n};
    shape.insert(shape.end(), input_shape.begin(), input_shape.end());
    Rng rx = stream_for(seed, "trigger/x");
    Rng ry = stream_for(seed, "trigger/y");

    TriggerSet t;
    t.seed = seed;
    t.X = Tensor::rand_uniform(std::move(shape), -2.0f, 2.0f, rx);
    t.y.resize(n);
    for (auto& label : t.y) label = static_cast<int>(ry.below(num_classes));
    return t;
}

Tensor total_loss(Model& m, const Tensor& batch_x, const std::vector<int>& batch_y,
                  const Tensor* trigger_x, const std::vector<int>* trigger_y,
                  const PassportBundle* passports, const TrainConfig& cfg, BranchMode branch) {
    const bool aware = branch == BranchMode::PassportAware;
    if (aware && has_enabled_layer(m) && !passports)
        throw UsageError("total_loss: passport-aware branch requires passports");

    Tensor loss;
    if (cfg.lambda1 > 0.0f) {
        if (!trigger_x || !trigger_y)
            throw UsageError("total_loss: lambda1 > 0 requires a trigger batch");
        // Triggers ride in the same batch so BN statistics update once per
        // step over the mixture the deployed model will actually see.
        const int nb = batch_x.shape()[0];
        const int nt = trigger_x->shape()[0];
        Tensor logits = forward(m, concat_rows(batch_x, *trigger_x), branch, passports,
                                /*training=*/true);
        loss = cross_entropy(slice_rows(logits, 0, nb), batch_y);
        loss = add(loss, mul_scalar(cross_entropy(slice_rows(logits, nb, nt), *trigger_y),
                                    cfg.lambda1));
    } else {
        loss = cross_entropy(forward(m, batch_x, branch, passports, /*training=*/true), batch_y);
    }

    if (aware && cfg.lambda2 > 0.0f && passports && has_enabled_layer(m))
        loss = add(loss, mul_scalar(hinge_term(m, *passports, cfg.alpha0), cfg.lambda2));

    return loss;
}

double hinge_total(const Model& m, const PassportBundle& passports, float alpha0) {
    NoGradGuard no_grad;
    return static_cast<double>(hinge_term(m, passports, alpha0).item());
}

TrainHistory train(Model& m, const Dataset& train_set, const TriggerSet* trigger,
                   const PassportBundle* passports, const TrainConfig& cfg) {
    validate_config(cfg);
    const bool enabled = has_enabled_layer(m);
    if (enabled && !passports) throw UsageError("train: passport-enabled model requires passports");
    if (cfg.lambda1 > 0.0f && !trigger)
        throw UsageError("train: lambda1 > 0 requires a trigger set");

    Rng sched_rng = stream_for(cfg.seed, "train/schedule");
    Rng shuffle_rng = stream_for(cfg.seed, "train/shuffle");
    Rng trig_rng = stream_for(cfg.seed, "train/trigger");

    const int n = train_set.size();
    TrainHistory history;

    // Per-epoch history accuracy is measured on a fixed subsample to keep
    // the bookkeeping cheap; callers evaluate full sets themselves.
    Dataset probe;
    {
        const int pn = std::min(n, 256);
        std::vector<int> idx(pn);
        for (int i = 0; i < pn; ++i) idx[i] = i;
        probe.X = gather_rows(train_set.X, idx);
        probe.y = gather_labels(train_set.y, idx);
        probe.num_classes = train_set.num_classes;
        probe.split = train_set.split;
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto order = shuffled_indices(n, shuffle_rng);
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int stop = std::min(n, start + cfg.batch_size);
            std::vector<int> idx(order.begin() + start, order.begin() + stop);
            Tensor bx = gather_rows(train_set.X, idx);
            const auto by = gather_labels(train_set.y, idx);

            Tensor tx;
            std::vector<int> ty;
            const Tensor* txp = nullptr;
            const std::vector<int>* typ = nullptr;
            if (trigger && cfg.lambda1 > 0.0f) {
                // A quarter of the batch keeps the statistics mix task-dominated.
                const int nt = std::min(std::max(1, cfg.batch_size / 4), trigger->size());
                std::vector<int> tidx(static_cast<std::size_t>(nt));
                for (auto& v : tidx) v = static_cast<int>(trig_rng.below(trigger->size()));
                tx = gather_rows(trigger->X, tidx);
                ty = gather_labels(trigger->y, tidx);
                txp = &tx;
                typ = &ty;
            }

            auto run_step = [&](BranchMode branch, std::vector<Tensor> params) {
                Tensor loss = total_loss(m, bx, by, txp, typ, passports, cfg, branch);
                if (!std::isfinite(loss.item()))
                    throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                             std::to_string(epoch) + ", step " +
                                             std::to_string(start / cfg.batch_size));
                backward(loss);
                sgd_step(params, cfg.lr);
            };

            if (cfg.schedule == Schedule::Alternating) {
                const bool aware_step = sched_rng.uniform() < cfg.passport_ratio;
                const BranchMode branch =
                    aware_step ? BranchMode::PassportAware : BranchMode::PassportFree;
                run_step(branch, trainable_params(m, branch));
            } else {
                // Both branches in one step; shared weights get both gradients.
                Tensor loss_free =
                    total_loss(m, bx, by, txp, typ, passports, cfg, BranchMode::PassportFree);
                Tensor loss_aware =
                    total_loss(m, bx, by, txp, typ, passports, cfg, BranchMode::PassportAware);
                Tensor loss = add(loss_free, loss_aware);
                if (!std::isfinite(loss.item()))
                    throw std::runtime_error("training diverged: non-finite loss at epoch " +
                                             std::to_string(epoch));
                backward(loss);
                auto params = trainable_params(m, BranchMode::PassportFree);
                auto aware_params = trainable_params(m, BranchMode::PassportAware);
                params.insert(params.end(), aware_params.begin(), aware_params.end());
                params = dedupe(std::move(params));
                sgd_step(params, cfg.lr);
            }
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.acc_free = evaluate_accuracy(m, probe, BranchMode::PassportFree, passports);
        rec.acc_aware = evaluate_accuracy(m, probe, BranchMode::PassportAware, passports);
        rec.hinge = (enabled && passports) ? hinge_total(m, *passports, cfg.alpha0) : 0.0;
        history.push_back(rec);
    }
    return history;
}

double evaluate_accuracy(Model& m, const Dataset& d, BranchMode branch,
                         const PassportBundle* passports) {
    NoGradGuard no_grad;
    const int n = d.size();
    const int chunk = 256;
    int correct = 0;
    try {
        for (int start = 0; start < n; start += chunk) {
            const int stop = std::min(n, start + chunk);
            std::vector<int> idx(static_cast<std::size_t>(stop - start));
            for (int i = start; i < stop; ++i) idx[i - start] = i;
            Tensor bx = gather_rows(d.X, idx);
            const auto pred = argmax_rows(forward(m, bx, branch, passports, /*training=*/false));
            for (int i = start; i < stop; ++i)
                if (pred[i - start] == d.y[i]) ++correct;
        }
    } catch (const UninitializedStatsError&) {
        return std::nan("");
    }
    return static_cast<double>(correct) / n;
}

double evaluate_trigger_accuracy(Model& m, const TriggerSet& t, BranchMode branch,
                                 const PassportBundle* passports) {
    NoGradGuard no_grad;
    if (t.size() == 0) throw UsageError("empty trigger set");
    const auto pred = argmax_rows(forward(m, t.X, branch, passports, /*training=*/false));
    int correct = 0;
    for (int i = 0; i < t.size(); ++i)
        if (pred[i] == t.y[i]) ++correct;
    return static_cast<double>(correct) / t.size();
}

}  // namespace passnorm
