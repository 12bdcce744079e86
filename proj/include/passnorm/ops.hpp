// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "passnorm/tensor.hpp"

namespace passnorm {

// Elementwise binary ops with right-aligned broadcasting (extents must
// match or be 1). Gradients of broadcast inputs are reduce-summed back.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor sqrt(const Tensor& a);

Tensor reshape(const Tensor& a, std::vector<int> new_shape);

// Reductions accumulate in double with fixed row-major order.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdims);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdims);

Tensor matmul(const Tensor& a, const Tensor& b);

// Cross-correlation (deep-learning convention, no kernel flip).
// x: (C_in,H,W) or (N,C_in,H,W); w: (C_out,C_in,k,k).
// Output spatial extent: floor((H + 2*padding - k)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Per-channel mean over all spatial positions: (C,H,W)->(C), (N,C,H,W)->(N,C).
Tensor global_avg_pool(const Tensor& x);

// Non-overlapping window average; windows must lie fully inside the input.
Tensor avg_pool2d(const Tensor& x, int k, int stride);

// x if x > 0 else slope * x; slope in [0,1).
Tensor leaky_relu(const Tensor& x, float slope);
Tensor relu(const Tensor& x);

// Rows [start, start+count) of a (N,...) tensor.
Tensor slice_rows(const Tensor& x, int start, int count);

// Concatenation along the leading axis; trailing extents must match.
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Mean cross-entropy over rows of logits (N,K) against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Row argmax, ties to the smallest index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace passnorm
