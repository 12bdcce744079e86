// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "passnorm/common.hpp"
#include "passnorm/rng.hpp"

namespace passnorm {

class Tensor;

namespace detail {

// Shared storage behind a Tensor handle. Records the reverse-mode tape:
// each non-leaf node keeps its parents and a backward function that reads
// this node's grad and accumulates into the parents' grads.
struct TensorData {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until touched by backward()/zero_grad()
    bool requires_grad = false;

    std::uint64_t node_id = 0;  // creation order; parents always precede children
    std::vector<std::shared_ptr<TensorData>> parents;
    std::function<void(TensorData&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

std::uint64_t next_node_id();

}  // namespace detail

std::int64_t numel_of(const std::vector<int>& shape);

// Dense row-major float32 tensor with an optional gradient buffer.
// Copying a Tensor copies the handle; the storage is shared. All values
// are finite after any committed operation; kernels accumulate in double
// with a fixed row-major summation order so seeded runs are bit-identical.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, float fill = 0.0f, bool requires_grad = false);

    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor ones(std::vector<int> shape, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, bool requires_grad = false);
    static Tensor rand_uniform(std::vector<int> shape, float lo, float hi, Rng& rng,
                               bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const std::vector<int>& shape() const;
    int dim() const { return static_cast<int>(shape().size()); }
    std::int64_t numel() const;

    std::span<const float> values() const;
    std::span<float> values_mut();
    float item() const;  // scalar extraction; UsageError if numel != 1

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);

    bool has_grad() const;
    std::span<const float> grad() const;  // UsageError if no grad populated
    std::span<float> grad_mut();
    void zero_grad();   // allocate and zero the grad buffer
    void clear_grad();  // drop the grad buffer entirely

    bool is_leaf() const;
    bool all_finite() const;

    // Value snapshot detached from the graph (deep copy, requires_grad off).
    Tensor detach() const;
    // Deep copy as a fresh leaf, keeping requires_grad.
    Tensor clone() const;

    std::shared_ptr<detail::TensorData> impl() const { return d_; }
    static Tensor wrap(std::shared_ptr<detail::TensorData> d);

private:
    std::shared_ptr<detail::TensorData> d_;
};

// Reverse-topological backward schedule for the recorded operations
// reachable from one root. Nodes are ordered by descending creation id,
// which is a topological order of the tape; run() executes each recorded
// backward function exactly once.
class Graph {
public:
    static Graph from(const Tensor& root);
    std::size_t size() const { return order_.size(); }
    void run();

private:
    std::vector<std::shared_ptr<detail::TensorData>> order_;
};

// Backpropagate from a scalar root: seeds d(root)/d(root) = 1 and
// accumulates into .grad of every contributing tensor that requires grad.
void backward(const Tensor& root);

// param <- param - lr * grad for each param, then clears the gradients.
// UsageError if any param has no populated gradient.
void sgd_step(std::vector<Tensor>& params, float lr);

// Max over coordinates of the relative error between the backprop gradient
// of f at x and the central finite difference (f(x+eps e_i) - f(x-eps e_i)).
// The denominator is max(|analytic|, |numeric|, 1), so near-zero gradients
// compare absolutely. f must return a scalar tensor (UsageError otherwise).
double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double eps);

// Disables tape recording in scope (inference / finite differences).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

bool grad_enabled();

}  // namespace passnorm
