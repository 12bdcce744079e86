// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "passnorm/tensor.hpp"

namespace passnorm {

struct Dataset {
    Tensor X;  // (N,D) or (N,C,H,W)
    std::vector<int> y;
    int num_classes = 0;
    std::string split;  // "train" or "val"

    int size() const { return X.defined() ? X.shape()[0] : 0; }
};

// Gaussian blob classes in R^dim: class centers drawn once from the seed,
// samples are center + unit noise. `family` selects one of two disjoint
// center sets (cross-domain fine-tuning uses the second).
Dataset make_blobs(int n, int dim, int num_classes, std::uint64_t seed, const std::string& split,
                   int family = 0);

// 1x8x8 oriented sinusoidal gratings, one orientation per class (family 0),
// or localized bumps at class-specific positions (family 1). The two
// families are the cross-domain pair for fine-tuning experiments.
Dataset make_patterns(int n, int num_classes, std::uint64_t seed, const std::string& split,
                      int family = 0);

// Rows of X at the given indices (no gradient tracking).
Tensor gather_rows(const Tensor& X, const std::vector<int>& idx);

std::vector<int> gather_labels(const std::vector<int>& y, const std::vector<int>& idx);

}  // namespace passnorm
