// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "passnorm/data.hpp"
#include "passnorm/model.hpp"
#include "passnorm/train.hpp"

namespace passnorm {

// Forensics evidence quantities. No verdict field: the report presents the
// fidelity gap, the signature match, and the trigger accuracy; the ownership
// claim is the operator's.
struct VerificationReport {
    double acc_deploy = -1.0;       // passport-free accuracy
    double acc_correct = -1.0;      // accuracy with the owner's passports
    double acc_forged_mean = -1.0;  // mean over k random forgeries (-1 if k == 0)
    int k_forgeries = 0;
    std::vector<std::uint8_t> layer_match;  // per enabled layer: exact bit match
    double bit_rate = -1.0;                 // matched bits / total bits
    double trigger_accuracy = -1.0;
};

// Passport-free accuracy, correct-passport accuracy, and the mean accuracy
// over k forged bundles drawn from the genuine passport distribution.
VerificationReport fidelity_verify(Model& m, const PassportBundle& passports, const Dataset& d,
                                   int k_forgeries, std::uint64_t seed);

// Recomputes wp for every enabled layer from the model's current weights,
// extracts the sign bits, and compares against the expected targets. A layer
// counts as detected only on an exact match of all its bits.
std::pair<std::vector<std::uint8_t>, double> detect_signature(
    const Model& m, const PassportBundle& passports, const std::vector<SignTargets>& expected);

// The extracted signature itself (gamma and beta bits per enabled layer).
Signature extract_model_signature(const Model& m, const PassportBundle& passports);

// Query-only trigger verification against an opaque predictor.
double blackbox_verify(const std::function<int(const Tensor&)>& predict,
                       const TriggerSet& trigger);

// Convenience predictor over a frozen model's passport-free branch.
std::function<int(const Tensor&)> model_predictor(Model& m);

}  // namespace passnorm
