// SPDX-License-Identifier: Apache-2.0

#include "passnorm/data.hpp"

#include <cmath>

#include "passnorm/common.hpp"

namespace passnorm {

Dataset make_blobs(int n, int dim, int num_classes, std::uint64_t seed, const std::string& split,
                   int family) {
    if (n < 1 || dim < 1 || num_classes < 2) throw UsageError("make_blobs: bad sizes");

    // Centers are shared across splits, samples are not. The center scale
    // keeps the classes learnable but close enough that corrupted affine
    // parameters actually cost accuracy.
    const std::string fam = "blobs" + std::to_string(family);
    Rng center_rng = stream_for(seed, fam + "/centers");
    std::vector<std::vector<float>> centers(num_classes, std::vector<float>(dim));
    for (auto& c : centers)
        for (auto& v : c) v = static_cast<float>(center_rng.normal() * 1.5);

    Rng rng = stream_for(seed, fam + "/" + split);
    std::vector<float> xs(static_cast<std::size_t>(n) * dim);
    std::vector<int> ys(n);
    for (int i = 0; i < n; ++i) {
        const int cls = static_cast<int>(rng.below(num_classes));
        ys[i] = cls;
        for (int d = 0; d < dim; ++d)
            xs[static_cast<std::size_t>(i) * dim + d] =
                centers[cls][d] + static_cast<float>(rng.normal());
    }

    Dataset ds;
    ds.X = Tensor::from_data({n, dim}, std::move(xs));
    ds.y = std::move(ys);
    ds.num_classes = num_classes;
    ds.split = split;
    return ds;
}

Dataset make_patterns(int n, int num_classes, std::uint64_t seed, const std::string& split,
                      int family) {
    if (n < 1 || num_classes < 2) throw UsageError("make_patterns: bad sizes");
    const int H = 8, W = 8;
    const std::string fam = "patterns" + std::to_string(family);
    Rng rng = stream_for(seed, fam + "/" + split);

    std::vector<float> xs(static_cast<std::size_t>(n) * H * W);
    std::vector<int> ys(n);
    const double pi = 3.14159265358979323846;
    for (int i = 0; i < n; ++i) {
        const int cls = static_cast<int>(rng.below(num_classes));
        ys[i] = cls;
        float* img = xs.data() + static_cast<std::size_t>(i) * H * W;
        if (family == 0) {
            // Oriented grating: per-class angle, random phase.
            const double theta = pi * cls / num_classes;
            const double phase = rng.uniform(0.0, 2.0 * pi);
            const double freq = 2.0 * pi * 2.0 / 8.0;
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) {
                    const double u = std::cos(theta) * c + std::sin(theta) * r;
                    img[r * W + c] = static_cast<float>(std::sin(freq * u + phase) +
                                                        0.4 * rng.normal());
                }
        } else {
            // Gaussian bump at a class-specific position on a ring.
            const double ang = 2.0 * pi * cls / num_classes;
            const double cy = 3.5 + 2.2 * std::sin(ang);
            const double cx = 3.5 + 2.2 * std::cos(ang);
            for (int r = 0; r < H; ++r)
                for (int c = 0; c < W; ++c) {
                    const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
                    img[r * W + c] = static_cast<float>(2.0 * std::exp(-d2 / 3.0) - 0.5 +
                                                        0.4 * rng.normal());
                }
        }
    }

    Dataset ds;
    ds.X = Tensor::from_data({n, 1, H, W}, std::move(xs));
    ds.y = std::move(ys);
    ds.num_classes = num_classes;
    ds.split = split;
    return ds;
}

Tensor gather_rows(const Tensor& X, const std::vector<int>& idx) {
    const auto& shape = X.shape();
    std::int64_t row = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) row *= shape[d];
    const auto xv = X.values();
    std::vector<float> out(static_cast<std::size_t>(idx.size()) * row);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= shape[0]) throw UsageError("gather_rows: index out of range");
        const float* src = xv.data() + static_cast<std::size_t>(idx[i]) * row;
        std::copy(src, src + row, out.begin() + static_cast<std::ptrdiff_t>(i * row));
    }
    std::vector<int> oshape = shape;
    oshape[0] = static_cast<int>(idx.size());
    return Tensor::from_data(std::move(oshape), std::move(out));
}

std::vector<int> gather_labels(const std::vector<int>& y, const std::vector<int>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
    return out;
}

}  // namespace passnorm
