// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "passnorm/data.hpp"
#include "passnorm/model.hpp"
#include "passnorm/verify.hpp"

namespace passnorm {

// One attack run's outcome plus everything needed to reproduce it.
struct AttackReport {
    std::string kind;
    double pre_task_acc = -1.0;
    double post_task_acc = -1.0;
    double bit_detection = -1.0;
    double layer_detection = -1.0;
    double acc_initial_mean = -1.0;    // random-passport forgery, before descent
    double acc_optimized_mean = -1.0;  // after descent
    double flip_fraction = -1.0;
    double flip_achieved = -1.0;  // fraction of selected bits the attacker realized
    std::map<std::string, double> params;  // hyperparameters and seeds
};

// Fine-tunes the deployed (branch-stripped) model on a new dataset, then
// measures signature detection with the owner's original passports and
// targets. A fresh head is built if the class count changes.
std::pair<Model, AttackReport> finetune_attack(const Model& deployed, const Dataset& new_train,
                                               const Dataset& new_eval, int epochs, float lr,
                                               const PassportBundle& owner,
                                               std::uint64_t seed);

// Global (class-blind) magnitude pruning: zeroes the ceil(rate * N) smallest
// |w| across all conv/fc kernels; norm affine and branch parameters excluded.
std::pair<Model, AttackReport> prune_attack(const Model& m, double rate);

struct PruneSweepRow {
    double rate = 0.0;
    double verify_acc = 0.0;  // correct-passport accuracy after pruning
    double bit_detection = 0.0;
    double layer_detection = 0.0;
};

// Prune the deployed model at each rate, re-attach the owner branch, and
// measure fidelity + signature detection.
std::vector<PruneSweepRow> prune_sweep(const Model& deployed, const BranchParams& branch,
                                       const PassportBundle& owner, Dataset& eval_data,
                                       const std::vector<double>& rates);

// Forges passports from random values and gradient-descends them on the task
// loss with all network weights frozen. Reports mean accuracy before and
// after optimization over num_trials forgeries.
AttackReport ambiguity_attack_forge(Model& verification_model, const Dataset& opt_data,
                                    Dataset& eval_data, int num_trials, int steps, float lr,
                                    std::uint64_t seed);

// Starts from the stolen owner passports and optimizes them to realize a
// sign pattern with ceil(flip_fraction * total_bits) positions flipped,
// while also descending the task loss. Network weights frozen. alpha0 is
// the margin the attacker demands of the flipped signs; a forensically
// useful forgery needs the same margin the owner trained with.
AttackReport ambiguity_attack_flip(Model& verification_model, const PassportBundle& owner,
                                   double flip_fraction, const Dataset& opt_data,
                                   Dataset& eval_data, int steps, float lr, std::uint64_t seed,
                                   float alpha0 = 1.0f, float lambda_flip = 50.0f);

}  // namespace passnorm
