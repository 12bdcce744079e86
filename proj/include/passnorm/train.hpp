// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "passnorm/data.hpp"
#include "passnorm/model.hpp"

namespace passnorm {

// ~100 out-of-distribution samples with owner-chosen labels, synthesized
// deterministically from the seed.
struct TriggerSet {
    Tensor X;
    std::vector<int> y;
    std::uint64_t seed = 0;

    int size() const { return X.defined() ? X.shape()[0] : 0; }
};

TriggerSet make_trigger_set(int n, const std::vector<int>& input_shape, int num_classes,
                            std::uint64_t seed);

enum class Schedule { Alternating, Simultaneous };

struct TrainConfig {
    float lambda1 = 1.0f;  // trigger-set loss weight
    float lambda2 = 0.3f;  // signature hinge weight
    float alpha0 = 1.0f;   // hinge margin
    float lr = 0.02f;
    int epochs = 0;
    int batch_size = 32;
    float passport_ratio = 0.5f;  // fraction of steps on the passport branch
    Schedule schedule = Schedule::Alternating;
    std::uint64_t seed = 0;  // batch shuffling + branch schedule
};

struct EpochRecord {
    int epoch = 0;
    double acc_free = 0.0;
    double acc_aware = 0.0;
    double hinge = 0.0;
};

using TrainHistory = std::vector<EpochRecord>;

// Task cross-entropy + lambda1 * trigger cross-entropy, plus the
// lambda2-weighted signature hinge term on passport-aware steps.
// UsageError if lambda1 > 0 without a trigger batch.
Tensor total_loss(Model& m, const Tensor& batch_x, const std::vector<int>& batch_y,
                  const Tensor* trigger_x, const std::vector<int>* trigger_y,
                  const PassportBundle* passports, const TrainConfig& cfg, BranchMode branch);

// Sum of the signature hinge over every enabled layer and both pipelines,
// at the model's current weights.
double hinge_total(const Model& m, const PassportBundle& passports, float alpha0);

// Alternating: each step trains exactly one branch, chosen by a seeded
// schedule with P(aware) = passport_ratio; running statistics update only
// for the active branch. Simultaneous: both branch losses summed per step.
// Aborts with a diagnostic if the loss goes non-finite.
TrainHistory train(Model& m, const Dataset& train_set, const TriggerSet* trigger,
                   const PassportBundle* passports, const TrainConfig& cfg);

// Inference-mode accuracy; NaN if the branch's BN statistics were never
// updated.
double evaluate_accuracy(Model& m, const Dataset& d, BranchMode branch,
                         const PassportBundle* passports);

double evaluate_trigger_accuracy(Model& m, const TriggerSet& t, BranchMode branch,
                                 const PassportBundle* passports);

}  // namespace passnorm
