// SPDX-License-Identifier: Apache-2.0

#include "passnorm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>
#include <unordered_set>

namespace passnorm {

namespace detail {

std::uint64_t next_node_id() {
    // Single-threaded graph construction contract; atomic is belt and braces.
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        n *= e;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape, float fill, bool requires_grad) {
    const std::int64_t n = numel_of(shape);
    d_ = std::make_shared<detail::TensorData>();
    d_->shape = std::move(shape);
    d_->data.assign(static_cast<std::size_t>(n), fill);
    d_->requires_grad = requires_grad;
    d_->node_id = detail::next_node_id();
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    const std::int64_t n = numel_of(shape);
    if (static_cast<std::size_t>(n) != data.size())
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->data = std::move(data);
    t.d_->requires_grad = requires_grad;
    t.d_->node_id = detail::next_node_id();
    return t;
}

Tensor Tensor::scalar(float value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return Tensor(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::ones(std::vector<int> shape, bool requires_grad) {
    return Tensor(std::move(shape), 1.0f, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, bool requires_grad) {
    const std::int64_t n = numel_of(shape);
    std::vector<float> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.normal());
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::rand_uniform(std::vector<int> shape, float lo, float hi, Rng& rng,
                            bool requires_grad) {
    const std::int64_t n = numel_of(shape);
    std::vector<float> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    return from_data(std::move(shape), std::move(data), requires_grad);
}

const std::vector<int>& Tensor::shape() const {
    if (!d_) throw UsageError("operation on an undefined tensor");
    return d_->shape;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(values().size()); }

std::span<const float> Tensor::values() const {
    if (!d_) throw UsageError("operation on an undefined tensor");
    return {d_->data.data(), d_->data.size()};
}

std::span<float> Tensor::values_mut() {
    if (!d_) throw UsageError("operation on an undefined tensor");
    return {d_->data.data(), d_->data.size()};
}

float Tensor::item() const {
    auto v = values();
    if (v.size() != 1) throw UsageError("item() requires a scalar tensor, shape is " + shape_str(shape()));
    return v[0];
}

bool Tensor::requires_grad() const { return d_ && d_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    if (!d_) throw UsageError("operation on an undefined tensor");
    d_->requires_grad = on;
    if (!on) d_->grad.clear();
    return *this;
}

bool Tensor::has_grad() const { return d_ && d_->grad.size() == d_->data.size() && !d_->data.empty(); }

std::span<const float> Tensor::grad() const {
    if (!has_grad()) throw UsageError("tensor has no populated gradient");
    return {d_->grad.data(), d_->grad.size()};
}

std::span<float> Tensor::grad_mut() {
    if (!has_grad()) throw UsageError("tensor has no populated gradient");
    return {d_->grad.data(), d_->grad.size()};
}

void Tensor::zero_grad() {
    if (!d_) throw UsageError("operation on an undefined tensor");
    d_->grad.assign(d_->data.size(), 0.0f);
}

void Tensor::clear_grad() {
    if (!d_) throw UsageError("operation on an undefined tensor");
    d_->grad.clear();
}

bool Tensor::is_leaf() const {
    if (!d_) throw UsageError("operation on an undefined tensor");
    return d_->is_leaf();
}

bool Tensor::all_finite() const {
    for (float v : values())
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor Tensor::detach() const {
    return from_data(shape(), std::vector<float>(d_->data), false);
}

Tensor Tensor::clone() const {
    return from_data(shape(), std::vector<float>(d_->data), requires_grad());
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorData> d) {
    Tensor t;
    t.d_ = std::move(d);
    return t;
}

Graph Graph::from(const Tensor& root) {
    Graph g;
    if (!root.defined()) throw UsageError("backward on an undefined tensor");

    // Iterative DFS collecting every reachable recorded node.
    std::unordered_set<const detail::TensorData*> seen;
    std::vector<std::shared_ptr<detail::TensorData>> stack{root.impl()};
    while (!stack.empty()) {
        auto node = std::move(stack.back());
        stack.pop_back();
        if (!node || seen.count(node.get())) continue;
        seen.insert(node.get());
        for (const auto& p : node->parents) stack.push_back(p);
        if (!node->is_leaf()) g.order_.push_back(std::move(node));
    }
    // Descending creation id is a reverse-topological order of the tape.
    std::sort(g.order_.begin(), g.order_.end(),
              [](const auto& a, const auto& b) { return a->node_id > b->node_id; });
    return g;
}

void Graph::run() {
    for (auto& node : order_) node->backward_fn(*node);
}

void backward(const Tensor& root) {
    if (root.numel() != 1) throw UsageError("backward requires a scalar root");
    auto g = Graph::from(root);
    root.impl()->ensure_grad();
    root.impl()->grad[0] += 1.0f;
    g.run();
}

void sgd_step(std::vector<Tensor>& params, float lr) {
    for (auto& p : params)
        if (!p.has_grad())
            throw UsageError("sgd_step: parameter has no populated gradient");
    for (auto& p : params) {
        auto v = p.values_mut();
        auto g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i)
            v[i] = static_cast<float>(static_cast<double>(v[i]) -
                                      static_cast<double>(lr) * static_cast<double>(g[i]));
        p.clear_grad();
    }
}

double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double eps) {
    if (eps <= 0.0) throw UsageError("grad_check: eps must be positive");
    if (!x.requires_grad()) throw UsageError("grad_check: x must require grad");

    x.clear_grad();
    Tensor y = f(x);
    if (y.numel() != 1) throw UsageError("grad_check: f must return a scalar");
    backward(y);
    if (!x.has_grad()) throw UsageError("grad_check: f does not depend on x");
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    x.clear_grad();

    NoGradGuard no_grad;
    auto vals = x.values_mut();
    double worst = 0.0;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const float saved = vals[i];
        const float xp = static_cast<float>(static_cast<double>(saved) + eps);
        const float xm = static_cast<float>(static_cast<double>(saved) - eps);
        vals[i] = xp;
        const double fp = f(x).item();
        vals[i] = xm;
        const double fm = f(x).item();
        vals[i] = saved;
        const double h = static_cast<double>(xp) - static_cast<double>(xm);
        const double numeric = (fp - fm) / h;
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace passnorm
