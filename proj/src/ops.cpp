// SPDX-License-Identifier: Apache-2.0

#include "passnorm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace passnorm {
namespace {

using detail::TensorData;

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Records the op on the tape when grad is enabled and some input needs it.
Tensor make_result(std::vector<int> shape, std::vector<float> data,
                   std::vector<Tensor> inputs,
                   std::function<void(TensorData&)> backward_fn) {
    Tensor out = Tensor::from_data(std::move(shape), std::move(data));
    bool any_rg = false;
    for (const auto& t : inputs) any_rg = any_rg || t.requires_grad();
    if (grad_enabled() && any_rg) {
        auto d = out.impl();
        d->requires_grad = true;
        d->parents.reserve(inputs.size());
        for (const auto& t : inputs) d->parents.push_back(t.impl());
        d->backward_fn = std::move(backward_fn);
    }
    return out;
}

void accumulate(const std::shared_ptr<TensorData>& p, const std::vector<double>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
        p->grad[i] += static_cast<float>(g[i]);
}

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
    const int rank = static_cast<int>(std::max(a.size(), b.size()));
    std::vector<int> out(rank);
    for (int d = 0; d < rank; ++d) {
        const int ea = d < rank - static_cast<int>(a.size()) ? 1 : a[d - (rank - a.size())];
        const int eb = d < rank - static_cast<int>(b.size()) ? 1 : b[d - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[d] = std::max(ea, eb);
    }
    return out;
}

// Strides of `shape` right-aligned to `out`, zero on broadcast dims.
std::vector<std::int64_t> aligned_strides(const std::vector<int>& shape,
                                          const std::vector<int>& out) {
    const int rank = static_cast<int>(out.size());
    const int off = rank - static_cast<int>(shape.size());
    std::vector<std::int64_t> strides(rank, 0);
    std::int64_t s = 1;
    for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
        strides[off + d] = (shape[d] == 1 && out[off + d] != 1) ? 0 : s;
        s *= shape[d];
    }
    return strides;
}

// Row-major traversal over out_shape in contiguous runs. The run is the
// longest trailing block over which each input either advances densely or
// stays constant; fn(o, ia, ib, len, astep, bstep) handles one run with
// astep/bstep in {0,1}.
template <typename Fn>
void for_each_broadcast(const std::vector<int>& out_shape,
                        const std::vector<int>& a_shape,
                        const std::vector<int>& b_shape, Fn&& fn) {
    const std::int64_t n = numel_of(out_shape);
    const int rank = static_cast<int>(out_shape.size());
    const auto sa = aligned_strides(a_shape, out_shape);
    const auto sb = aligned_strides(b_shape, out_shape);

    std::int64_t dense_a = 1, dense_b = 1, zero_a = 1, zero_b = 1;
    {
        bool da = true, db = true, za = true, zb = true;
        std::int64_t below = 1;
        for (int d = rank - 1; d >= 0; --d) {
            const bool unit = out_shape[d] == 1;
            if (da && (unit || sa[d] == below)) dense_a *= out_shape[d]; else da = false;
            if (db && (unit || sb[d] == below)) dense_b *= out_shape[d]; else db = false;
            if (za && (unit || sa[d] == 0)) zero_a *= out_shape[d]; else za = false;
            if (zb && (unit || sb[d] == 0)) zero_b *= out_shape[d]; else zb = false;
            below *= out_shape[d];
        }
    }
    std::int64_t run = 1;
    int astep = 1, bstep = 1;
    const std::int64_t candidates[4][3] = {{std::min(dense_a, dense_b), 1, 1},
                                           {std::min(dense_a, zero_b), 1, 0},
                                           {std::min(zero_a, dense_b), 0, 1},
                                           {std::min(zero_a, zero_b), 0, 0}};
    for (const auto& c : candidates)
        if (c[0] > run) {
            run = c[0];
            astep = static_cast<int>(c[1]);
            bstep = static_cast<int>(c[2]);
        }

    // The run is a product of whole trailing dimensions; find its boundary.
    int block_dim = rank;
    for (std::int64_t prod = 1; block_dim > 0 && prod < run; --block_dim)
        prod *= out_shape[block_dim - 1];

    std::vector<int> idx(rank, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t o = 0; o < n; o += run) {
        fn(o, oa, ob, run, astep, bstep);
        for (int d = block_dim - 1; d >= 0; --d) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            oa -= static_cast<std::int64_t>(out_shape[d]) * sa[d];
            ob -= static_cast<std::int64_t>(out_shape[d]) * sb[d];
        }
    }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
    const auto out_shape = broadcast_shape(a.shape(), b.shape());
    std::vector<float> out(static_cast<std::size_t>(numel_of(out_shape)));
    const auto av = a.values();
    const auto bv = b.values();
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](std::int64_t o, std::int64_t ia, std::int64_t ib, std::int64_t len,
                           int astep, int bstep) {
                           const float* pa = av.data() + ia;
                           const float* pb = bv.data() + ib;
                           float* po = out.data() + o;
                           switch (op) {
                               case BinOp::Add:
                                   for (std::int64_t i = 0; i < len; ++i)
                                       po[i] = pa[i * astep] + pb[i * bstep];
                                   break;
                               case BinOp::Sub:
                                   for (std::int64_t i = 0; i < len; ++i)
                                       po[i] = pa[i * astep] - pb[i * bstep];
                                   break;
                               case BinOp::Mul:
                                   for (std::int64_t i = 0; i < len; ++i)
                                       po[i] = pa[i * astep] * pb[i * bstep];
                                   break;
                               case BinOp::Div:
                                   for (std::int64_t i = 0; i < len; ++i)
                                       po[i] = pa[i * astep] / pb[i * bstep];
                                   break;
                           }
                       });

    auto a_shape = a.shape();
    auto b_shape = b.shape();
    return make_result(out_shape, std::move(out), {a, b}, [=](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& pa = node.parents[0];
        const auto& pb = node.parents[1];
        const bool want_a = pa->requires_grad;
        const bool want_b = pb->requires_grad;
        std::vector<double> ga(want_a ? pa->data.size() : 0, 0.0);
        std::vector<double> gb(want_b ? pb->data.size() : 0, 0.0);
        for_each_broadcast(node.shape, a_shape, b_shape,
                           [&](std::int64_t o, std::int64_t ia, std::int64_t ib, std::int64_t len,
                               int astep, int bstep) {
                               for (std::int64_t i = 0; i < len; ++i) {
                                   const double go = node.grad[o + i];
                                   const std::int64_t ja = ia + i * astep;
                                   const std::int64_t jb = ib + i * bstep;
                                   switch (op) {
                                       case BinOp::Add:
                                           if (want_a) ga[ja] += go;
                                           if (want_b) gb[jb] += go;
                                           break;
                                       case BinOp::Sub:
                                           if (want_a) ga[ja] += go;
                                           if (want_b) gb[jb] -= go;
                                           break;
                                       case BinOp::Mul:
                                           if (want_a) ga[ja] += go * pb->data[jb];
                                           if (want_b) gb[jb] += go * pa->data[ja];
                                           break;
                                       case BinOp::Div: {
                                           const double y = pb->data[jb];
                                           if (want_a) ga[ja] += go / y;
                                           if (want_b) gb[jb] -= go * pa->data[ja] / (y * y);
                                           break;
                                       }
                                   }
                               }
                           });
        if (want_a) accumulate(pa, ga);
        if (want_b) accumulate(pb, gb);
    });
}

// Axes normalized, deduplicated, validated against rank.
std::vector<int> normalize_axes(std::vector<int> axes, int rank) {
    for (auto& ax : axes) {
        if (ax < 0) ax += rank;
        if (ax < 0 || ax >= rank)
            throw DimensionError("reduction axis " + std::to_string(ax) + " out of range");
    }
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    return axes;
}

Tensor reduce(const Tensor& a, std::vector<int> axes, bool keepdims, bool take_mean) {
    const auto& in_shape = a.shape();
    const int rank = static_cast<int>(in_shape.size());
    axes = normalize_axes(std::move(axes), rank);

    std::vector<int> kept_shape = in_shape;  // reduced dims -> 1
    std::int64_t count = 1;
    for (int ax : axes) {
        count *= in_shape[ax];
        kept_shape[ax] = 1;
    }

    // Map each input element to its output cell via zero strides.
    std::vector<double> acc(static_cast<std::size_t>(numel_of(kept_shape)), 0.0);
    const auto av = a.values();
    for_each_broadcast(in_shape, in_shape, kept_shape,
                       [&](std::int64_t, std::int64_t ia, std::int64_t ib, std::int64_t len,
                           int astep, int bstep) {
                           for (std::int64_t i = 0; i < len; ++i)
                               acc[ib + i * bstep] += av[ia + i * astep];
                       });

    std::vector<float> out(acc.size());
    const double scale = take_mean ? 1.0 / static_cast<double>(count) : 1.0;
    for (std::size_t i = 0; i < acc.size(); ++i)
        out[i] = static_cast<float>(acc[i] * scale);

    std::vector<int> out_shape;
    if (keepdims) {
        out_shape = kept_shape;
    } else {
        for (int d = 0; d < rank; ++d)
            if (!std::binary_search(axes.begin(), axes.end(), d)) out_shape.push_back(in_shape[d]);
        if (out_shape.empty()) out_shape.push_back(1);
    }

    auto saved_in = in_shape;
    auto saved_kept = kept_shape;
    return make_result(out_shape, std::move(out), {a}, [=](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(p->data.size(), 0.0);
        for_each_broadcast(saved_in, saved_in, saved_kept,
                           [&](std::int64_t, std::int64_t ia, std::int64_t ib, std::int64_t len,
                               int astep, int bstep) {
                               for (std::int64_t i = 0; i < len; ++i)
                                   g[ia + i * astep] +=
                                       static_cast<double>(node.grad[ib + i * bstep]) * scale;
                           });
        accumulate(p, g);
    });
}

std::vector<int> all_axes(int rank) {
    std::vector<int> axes(rank);
    for (int d = 0; d < rank; ++d) axes[d] = d;
    return axes;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }
Tensor divide(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div); }

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

Tensor add_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.values().begin(), a.values().end());
    for (auto& v : out) v += s;
    return make_result(a.shape(), std::move(out), {a}, [](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(node.grad.begin(), node.grad.end());
        accumulate(p, g);
    });
}

Tensor mul_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(node.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = static_cast<double>(node.grad[i]) * s;
        accumulate(p, g);
    });
}

Tensor sqrt(const Tensor& a) {
    std::vector<float> out(a.values().begin(), a.values().end());
    for (auto& v : out) v = std::sqrt(v);
    return make_result(a.shape(), std::move(out), {a}, [](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(node.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = static_cast<double>(node.grad[i]) / (2.0 * node.data[i]);
        accumulate(p, g);
    });
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                             " changes element count");
    std::vector<float> out(a.values().begin(), a.values().end());
    return make_result(std::move(new_shape), std::move(out), {a}, [](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(node.grad.begin(), node.grad.end());
        accumulate(p, g);
    });
}

Tensor sum(const Tensor& a) { return reduce(a, all_axes(a.dim()), false, false); }
Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdims) {
    return reduce(a, std::move(axes), keepdims, false);
}
Tensor mean(const Tensor& a) { return reduce(a, all_axes(a.dim()), false, true); }
Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdims) {
    return reduce(a, std::move(axes), keepdims, true);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2 || b.dim() != 2)
        throw DimensionError("matmul requires 2-d tensors, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1];
    const int kb = b.shape()[0], n = b.shape()[1];
    if (k != kb)
        throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));

    const auto av = a.values();
    const auto bv = b.values();
    std::vector<float> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int l = 0; l < k; ++l)
                acc += static_cast<double>(av[i * k + l]) * static_cast<double>(bv[l * n + j]);
            out[static_cast<std::size_t>(i) * n + j] = static_cast<float>(acc);
        }
    }

    return make_result({m, n}, std::move(out), {a, b}, [m, n, k](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& pa = node.parents[0];
        const auto& pb = node.parents[1];
        if (pa->requires_grad) {
            std::vector<double> ga(pa->data.size(), 0.0);
            for (int i = 0; i < m; ++i) {
                for (int l = 0; l < k; ++l) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j)
                        acc += static_cast<double>(node.grad[static_cast<std::size_t>(i) * n + j]) *
                               static_cast<double>(pb->data[static_cast<std::size_t>(l) * n + j]);
                    ga[static_cast<std::size_t>(i) * k + l] = acc;
                }
            }
            accumulate(pa, ga);
        }
        if (pb->requires_grad) {
            std::vector<double> gb(pb->data.size(), 0.0);
            for (int l = 0; l < k; ++l) {
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += static_cast<double>(pa->data[static_cast<std::size_t>(i) * k + l]) *
                               static_cast<double>(node.grad[static_cast<std::size_t>(i) * n + j]);
                    gb[static_cast<std::size_t>(l) * n + j] = acc;
                }
            }
            accumulate(pb, gb);
        }
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (stride < 1) throw UsageError("conv2d: stride must be >= 1");
    if (padding < 0) throw UsageError("conv2d: padding must be >= 0");
    const bool batched = x.dim() == 4;
    if (!batched && x.dim() != 3)
        throw DimensionError("conv2d input must be (C,H,W) or (N,C,H,W), got " +
                             shape_str(x.shape()));
    if (w.dim() != 4)
        throw DimensionError("conv2d kernel must be (C_out,C_in,k,k), got " + shape_str(w.shape()));

    const int N = batched ? x.shape()[0] : 1;
    const int Ci = x.shape()[batched ? 1 : 0];
    const int H = x.shape()[batched ? 2 : 1];
    const int W = x.shape()[batched ? 3 : 2];
    const int Co = w.shape()[0];
    const int kh = w.shape()[2];
    const int kw = w.shape()[3];
    if (w.shape()[1] != Ci)
        throw DimensionError("conv2d: kernel expects " + std::to_string(w.shape()[1]) +
                             " input channels, input has " + std::to_string(Ci));
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw DimensionError("conv2d: kernel larger than padded input");
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;

    const auto xv = x.values();
    const auto wv = w.values();
    std::vector<float> out(static_cast<std::size_t>(N) * Co * Ho * Wo);

    // Valid kernel ranges per output position (bounds hoisted out of the
    // accumulation loops; the summation order is unchanged).
    std::vector<int> rlo(Ho), rhi(Ho), clo(Wo), chi(Wo);
    for (int oh = 0; oh < Ho; ++oh) {
        const int h0 = oh * stride - padding;
        rlo[oh] = std::max(0, -h0);
        rhi[oh] = std::min(kh, H - h0);
    }
    for (int ow = 0; ow < Wo; ++ow) {
        const int w0 = ow * stride - padding;
        clo[ow] = std::max(0, -w0);
        chi[ow] = std::min(kw, W - w0);
    }

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            for (int oh = 0; oh < Ho; ++oh) {
                const int h0 = oh * stride - padding;
                for (int ow = 0; ow < Wo; ++ow) {
                    const int w0 = ow * stride - padding;
                    double acc = 0.0;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const float* xbase =
                            xv.data() + (static_cast<std::size_t>(n) * Ci + ci) * H * W;
                        const float* wbase =
                            wv.data() + (static_cast<std::size_t>(co) * Ci + ci) * kh * kw;
                        for (int r = rlo[oh]; r < rhi[oh]; ++r) {
                            const float* xrow = xbase + (h0 + r) * W + w0;
                            const float* wrow = wbase + r * kw;
                            for (int c = clo[ow]; c < chi[ow]; ++c)
                                acc += static_cast<double>(xrow[c]) *
                                       static_cast<double>(wrow[c]);
                        }
                    }
                    out[((static_cast<std::size_t>(n) * Co + co) * Ho + oh) * Wo + ow] =
                        static_cast<float>(acc);
                }
            }
        }
    }

    std::vector<int> out_shape = batched ? std::vector<int>{N, Co, Ho, Wo}
                                         : std::vector<int>{Co, Ho, Wo};
    return make_result(std::move(out_shape), std::move(out), {x, w},
                       [=](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& px = node.parents[0];
        const auto& pw = node.parents[1];
        const bool want_x = px->requires_grad;
        const bool want_w = pw->requires_grad;
        std::vector<double> gx(want_x ? px->data.size() : 0, 0.0);
        std::vector<double> gw(want_w ? pw->data.size() : 0, 0.0);
        std::vector<int> rlo(Ho), rhi(Ho), clo(Wo), chi(Wo);
        for (int oh = 0; oh < Ho; ++oh) {
            const int h0 = oh * stride - padding;
            rlo[oh] = std::max(0, -h0);
            rhi[oh] = std::min(kh, H - h0);
        }
        for (int ow = 0; ow < Wo; ++ow) {
            const int w0 = ow * stride - padding;
            clo[ow] = std::max(0, -w0);
            chi[ow] = std::min(kw, W - w0);
        }
        for (int n = 0; n < N; ++n) {
            for (int co = 0; co < Co; ++co) {
                for (int oh = 0; oh < Ho; ++oh) {
                    const int h0 = oh * stride - padding;
                    for (int ow = 0; ow < Wo; ++ow) {
                        const int w0 = ow * stride - padding;
                        const double go =
                            node.grad[((static_cast<std::size_t>(n) * Co + co) * Ho + oh) * Wo + ow];
                        if (go == 0.0) continue;
                        for (int ci = 0; ci < Ci; ++ci) {
                            const std::size_t xoff =
                                (static_cast<std::size_t>(n) * Ci + ci) * H * W;
                            const std::size_t woff =
                                (static_cast<std::size_t>(co) * Ci + ci) * kh * kw;
                            for (int r = rlo[oh]; r < rhi[oh]; ++r) {
                                const std::size_t xrow = xoff + (h0 + r) * W + w0;
                                const std::size_t wrow = woff + r * kw;
                                for (int c = clo[ow]; c < chi[ow]; ++c) {
                                    if (want_x) gx[xrow + c] += go * pw->data[wrow + c];
                                    if (want_w) gw[wrow + c] += go * px->data[xrow + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        if (want_x) accumulate(px, gx);
        if (want_w) accumulate(pw, gw);
    });
}

Tensor global_avg_pool(const Tensor& x) {
    const bool batched = x.dim() == 4;
    if (!batched && x.dim() != 3)
        throw DimensionError("global_avg_pool input must be (C,H,W) or (N,C,H,W), got " +
                             shape_str(x.shape()));
    const int N = batched ? x.shape()[0] : 1;
    const int C = x.shape()[batched ? 1 : 0];
    const int H = x.shape()[batched ? 2 : 1];
    const int W = x.shape()[batched ? 3 : 2];
    const int hw = H * W;

    const auto xv = x.values();
    std::vector<float> out(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
            for (int i = 0; i < hw; ++i) acc += xv[base + i];
            out[static_cast<std::size_t>(n) * C + c] = static_cast<float>(acc / hw);
        }
    }

    std::vector<int> out_shape = batched ? std::vector<int>{N, C} : std::vector<int>{C};
    return make_result(std::move(out_shape), std::move(out), {x}, [=](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(p->data.size(), 0.0);
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const double go = node.grad[static_cast<std::size_t>(n) * C + c] / hw;
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                for (int i = 0; i < hw; ++i) g[base + i] += go;
            }
        }
        accumulate(p, g);
    });
}

Tensor avg_pool2d(const Tensor& x, int k, int stride) {
    if (x.dim() != 4)
        throw DimensionError("avg_pool2d input must be (N,C,H,W), got " + shape_str(x.shape()));
    if (k < 1 || stride < 1) throw UsageError("avg_pool2d: k and stride must be >= 1");
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (k > H || k > W) throw DimensionError("avg_pool2d: window larger than input");
    const int Ho = (H - k) / stride + 1;
    const int Wo = (W - k) / stride + 1;

    const auto xv = x.values();
    std::vector<float> out(static_cast<std::size_t>(N) * C * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = 0.0;
                    for (int r = 0; r < k; ++r)
                        for (int s = 0; s < k; ++s)
                            acc += xv[((static_cast<std::size_t>(n) * C + c) * H + oh * stride + r) * W +
                                      ow * stride + s];
                    out[((static_cast<std::size_t>(n) * C + c) * Ho + oh) * Wo + ow] =
                        static_cast<float>(acc / (k * k));
                }

    return make_result({N, C, Ho, Wo}, std::move(out), {x}, [=](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(p->data.size(), 0.0);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        const double go =
                            node.grad[((static_cast<std::size_t>(n) * C + c) * Ho + oh) * Wo + ow] /
                            (k * k);
                        for (int r = 0; r < k; ++r)
                            for (int s = 0; s < k; ++s)
                                g[((static_cast<std::size_t>(n) * C + c) * H + oh * stride + r) * W +
                                  ow * stride + s] += go;
                    }
        accumulate(p, g);
    });
}

Tensor leaky_relu(const Tensor& x, float slope) {
    if (slope < 0.0f || slope >= 1.0f) throw UsageError("leaky_relu: slope must be in [0,1)");
    std::vector<float> out(x.values().begin(), x.values().end());
    for (auto& v : out) v = v > 0.0f ? v : slope * v;
    return make_result(x.shape(), std::move(out), {x}, [slope](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(node.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = static_cast<double>(node.grad[i]) * (p->data[i] > 0.0f ? 1.0 : slope);
        accumulate(p, g);
    });
}

Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0f); }

Tensor slice_rows(const Tensor& x, int start, int count) {
    if (x.dim() < 1) throw DimensionError("slice_rows: input must have a leading axis");
    const int n = x.shape()[0];
    if (start < 0 || count < 1 || start + count > n)
        throw UsageError("slice_rows: range [" + std::to_string(start) + "," +
                         std::to_string(start + count) + ") out of " + std::to_string(n) + " rows");
    std::int64_t row = 1;
    for (int d = 1; d < x.dim(); ++d) row *= x.shape()[d];

    const auto xv = x.values();
    std::vector<float> out(xv.begin() + static_cast<std::ptrdiff_t>(start * row),
                           xv.begin() + static_cast<std::ptrdiff_t>((start + count) * row));
    std::vector<int> oshape = x.shape();
    oshape[0] = count;
    return make_result(std::move(oshape), std::move(out), {x}, [start, row](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& p = node.parents[0];
        std::vector<double> g(p->data.size(), 0.0);
        for (std::size_t i = 0; i < node.grad.size(); ++i)
            g[static_cast<std::size_t>(start) * row + i] = node.grad[i];
        accumulate(p, g);
    });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.dim() != b.dim() || a.dim() < 1)
        throw DimensionError("concat_rows: rank mismatch");
    for (int d = 1; d < a.dim(); ++d)
        if (a.shape()[d] != b.shape()[d])
            throw DimensionError("concat_rows: trailing extents differ");

    const auto av = a.values();
    const auto bv = b.values();
    std::vector<float> out;
    out.reserve(av.size() + bv.size());
    out.insert(out.end(), av.begin(), av.end());
    out.insert(out.end(), bv.begin(), bv.end());
    std::vector<int> oshape = a.shape();
    oshape[0] += b.shape()[0];
    return make_result(std::move(oshape), std::move(out), {a, b}, [](TensorData& node) {
        if (node.grad.empty()) return;
        const auto& pa = node.parents[0];
        const auto& pb = node.parents[1];
        std::vector<double> ga(pa->data.size()), gb(pb->data.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = node.grad[i];
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = node.grad[ga.size() + i];
        accumulate(pa, ga);
        accumulate(pb, gb);
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.dim() != 2)
        throw DimensionError("cross_entropy logits must be (N,K), got " + shape_str(logits.shape()));
    const int N = logits.shape()[0], K = logits.shape()[1];
    if (static_cast<int>(labels.size()) != N)
        throw UsageError("cross_entropy: got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(N) + " rows");
    for (int y : labels)
        if (y < 0 || y >= K) throw UsageError("cross_entropy: label out of range");

    const auto zv = logits.values();
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        const float* row = zv.data() + static_cast<std::size_t>(i) * K;
        double zmax = row[0];
        for (int j = 1; j < K; ++j) zmax = std::max(zmax, static_cast<double>(row[j]));
        double se = 0.0;
        for (int j = 0; j < K; ++j) se += std::exp(static_cast<double>(row[j]) - zmax);
        loss += zmax + std::log(se) - static_cast<double>(row[labels[i]]);
    }
    loss /= N;

    auto saved_labels = labels;
    return make_result({1}, {static_cast<float>(loss)}, {logits}, [=](TensorData& node) {
        if (node.grad.empty()) return;
        const double go = node.grad[0];
        const auto& p = node.parents[0];
        std::vector<double> g(p->data.size(), 0.0);
        for (int i = 0; i < N; ++i) {
            const float* row = p->data.data() + static_cast<std::size_t>(i) * K;
            double zmax = row[0];
            for (int j = 1; j < K; ++j) zmax = std::max(zmax, static_cast<double>(row[j]));
            double se = 0.0;
            for (int j = 0; j < K; ++j) se += std::exp(static_cast<double>(row[j]) - zmax);
            for (int j = 0; j < K; ++j) {
                const double soft = std::exp(static_cast<double>(row[j]) - zmax) / se;
                const double onehot = (j == saved_labels[i]) ? 1.0 : 0.0;
                g[static_cast<std::size_t>(i) * K + j] = go * (soft - onehot) / N;
            }
        }
        accumulate(p, g);
    });
}

std::vector<int> argmax_rows(const Tensor& logits) {
    if (logits.dim() != 2)
        throw DimensionError("argmax_rows input must be (N,K), got " + shape_str(logits.shape()));
    const int N = logits.shape()[0], K = logits.shape()[1];
    const auto zv = logits.values();
    std::vector<int> out(N);
    for (int i = 0; i < N; ++i) {
        const float* row = zv.data() + static_cast<std::size_t>(i) * K;
        int best = 0;
        for (int j = 1; j < K; ++j)
            if (row[j] > row[best]) best = j;
        out[i] = best;
    }
    return out;
}

}  // namespace passnorm
