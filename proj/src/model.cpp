// SPDX-License-Identifier: Apache-2.0

#include "passnorm/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "passnorm/ops.hpp"

namespace passnorm {
namespace {

Tensor he_uniform(std::vector<int> shape, int fan_in, std::uint64_t seed,
                  const std::string& name) {
    Rng rng = stream_for(seed, name);
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    return Tensor::rand_uniform(std::move(shape), -bound, bound, rng, /*requires_grad=*/true);
}

// Spatial size tracking through the conv stack; {C} stays {C} through FC.
std::vector<int> layer_output_shape(const LayerDef& def, const std::vector<int>& in) {
    if (def.op == LayerDef::Op::FC) {
        if (in.size() != 1) throw SpecError("fc layer expects flat input");
        return {def.out_channels};
    }
    if (in.size() != 3) throw SpecError("conv layer expects (C,H,W) input");
    const int h = (in[1] + 2 * def.pad - def.kernel) / def.stride + 1;
    const int w = (in[2] + 2 * def.pad - def.kernel) / def.stride + 1;
    if (def.kernel > in[1] + 2 * def.pad || def.kernel > in[2] + 2 * def.pad)
        throw SpecError("conv kernel larger than padded input");
    std::vector<int> out = {def.out_channels, h, w};
    if (def.pool) {
        if (out[1] < 2 || out[2] < 2) throw SpecError("pool on too-small feature map");
        out[1] /= 2;
        out[2] /= 2;
    }
    if (def.global_pool) out = {def.out_channels};
    return out;
}

void init_norm_state(PassportNormState& st, const ModelSpec& spec, int channels,
                     bool enabled, AblationConfig config, std::uint64_t seed,
                     const std::string& prefix) {
    st.kind = spec.norm;
    if (st.kind.algo == NormAlgo::Group) {
        st.kind.groups = std::min(4, channels);
        if (channels % st.kind.groups != 0)
            throw SpecError("group norm: channel count " + std::to_string(channels) +
                            " not divisible by " + std::to_string(st.kind.groups) + " groups");
    }
    st.channels = channels;
    st.momentum = spec.momentum;
    st.gamma0 = Tensor::ones({channels}, /*requires_grad=*/true);
    st.beta0 = Tensor::zeros({channels}, /*requires_grad=*/true);
    if (st.kind.algo == NormAlgo::Batch) {
        st.running_mu0 = Tensor::zeros({channels});
        st.running_var0 = Tensor::ones({channels});
        st.init0 = false;
        if (enabled && config != AblationConfig::SharedDirect) {
            st.running_mu1 = Tensor::zeros({channels});
            st.running_var1 = Tensor::ones({channels});
            st.init1 = false;
        }
    }
    if (enabled && config == AblationConfig::Full) {
        const int hidden = pipeline_hidden_width(channels);
        st.w1_gamma = he_uniform({channels, hidden}, channels, seed, prefix + ".branch.w1_gamma");
        st.w2_gamma = he_uniform({hidden, channels}, hidden, seed, prefix + ".branch.w2_gamma");
        st.w1_beta = he_uniform({channels, hidden}, channels, seed, prefix + ".branch.w1_beta");
        st.w2_beta = he_uniform({hidden, channels}, hidden, seed, prefix + ".branch.w2_beta");
    }
}

bool layer_has_branch_tensors(const ModelSpec& spec, AblationConfig config) {
    // SharedDirect keeps no branch tensors at all; IndependentDirect keeps
    // BN running buffers; Full adds the pipeline weights.
    if (config == AblationConfig::Full) return true;
    return config == AblationConfig::IndependentDirect && spec.norm.algo == NormAlgo::Batch;
}

}  // namespace

std::string to_string(AblationConfig c) {
    switch (c) {
        case AblationConfig::SharedDirect: return "A";
        case AblationConfig::IndependentDirect: return "B";
        case AblationConfig::Full: return "C";
    }
    return "?";
}

AblationConfig ablation_from_string(const std::string& s) {
    if (s == "A" || s == "a") return AblationConfig::SharedDirect;
    if (s == "B" || s == "b") return AblationConfig::IndependentDirect;
    if (s == "C" || s == "c") return AblationConfig::Full;
    throw UsageError("unknown ablation config '" + s + "' (expected A, B, or C)");
}

ModelSpec toy_mlp_spec(int input_dim, int num_classes, NormKind kind) {
    ModelSpec spec;
    spec.input_shape = {input_dim};
    spec.num_classes = num_classes;
    spec.norm = kind;
    LayerDef h1{LayerDef::Op::FC, 64};
    h1.has_norm = true;
    h1.act = true;
    LayerDef h2{LayerDef::Op::FC, 32};
    h2.has_norm = true;
    h2.act = true;
    LayerDef head{LayerDef::Op::FC, num_classes};
    head.bias = true;
    spec.layers = {h1, h2, head};
    spec.passport_mask = {true, true};
    return spec;
}

ModelSpec toy_cnn_spec(int in_channels, int num_classes, NormKind kind) {
    ModelSpec spec;
    spec.input_shape = {in_channels, 8, 8};
    spec.num_classes = num_classes;
    spec.norm = kind;
    LayerDef c1{LayerDef::Op::Conv, 8};
    c1.has_norm = true;
    c1.act = true;
    LayerDef c2{LayerDef::Op::Conv, 16};
    c2.has_norm = true;
    c2.act = true;
    c2.pool = true;
    LayerDef c3{LayerDef::Op::Conv, 32};
    c3.has_norm = true;
    c3.act = true;
    c3.global_pool = true;
    LayerDef head{LayerDef::Op::FC, num_classes};
    head.bias = true;
    spec.layers = {c1, c2, c3, head};
    spec.passport_mask = {true, true, true};
    return spec;
}

void validate_spec(const ModelSpec& spec) {
    if (spec.layers.empty()) throw SpecError("model spec has no layers");
    if (spec.num_classes < 2) throw SpecError("model spec needs at least two classes");
    if (spec.input_shape.size() != 1 && spec.input_shape.size() != 3)
        throw SpecError("input shape must be {D} or {C,H,W}");
    if (spec.momentum <= 0.0f || spec.momentum > 1.0f)
        throw SpecError("momentum must lie in (0,1]");
    if (spec.norm.eps <= 0.0f) throw SpecError("norm eps must be positive");

    std::size_t norm_count = 0;
    std::vector<int> shape = spec.input_shape;
    for (const auto& def : spec.layers) {
        if (def.out_channels < 1) throw SpecError("layer with non-positive width");
        if (def.op == LayerDef::Op::Conv && shape.size() != 3)
            throw SpecError("conv layer requires spatial input");
        if (def.has_norm) ++norm_count;
        shape = layer_output_shape(def, shape);
    }
    if (shape.size() != 1 || shape[0] != spec.num_classes)
        throw SpecError("model does not end in per-class logits");
    if (spec.passport_mask.size() != norm_count)
        throw SpecError("passport mask length " + std::to_string(spec.passport_mask.size()) +
                        " does not match " + std::to_string(norm_count) + " norm layers");
    // Norm state is a field of its weighted layer, so the precedent-weight
    // requirement holds structurally for every enabled layer.
}

Model build_model(const ModelSpec& spec, AblationConfig config, std::uint64_t seed) {
    validate_spec(spec);
    Model m;
    m.spec = spec;
    m.config = config;
    m.build_seed = seed;

    std::vector<int> shape = spec.input_shape;
    int norm_id = 0;
    for (std::size_t li = 0; li < spec.layers.size(); ++li) {
        const auto& def = spec.layers[li];
        ModelLayer layer;
        layer.def = def;
        const std::string prefix = "layer" + std::to_string(li);
        if (def.op == LayerDef::Op::Conv) {
            const int in_c = shape[0];
            layer.weight = he_uniform({def.out_channels, in_c, def.kernel, def.kernel},
                                      in_c * def.kernel * def.kernel, seed, prefix + ".weight");
        } else {
            const int in_d = shape[0];
            layer.weight = he_uniform({in_d, def.out_channels}, in_d, seed, prefix + ".weight");
        }
        if (def.bias) layer.bias = Tensor::zeros({def.out_channels}, /*requires_grad=*/true);

        if (def.has_norm) {
            layer.norm_id = norm_id;
            layer.passport_enabled = spec.passport_mask[norm_id];
            init_norm_state(layer.norm, spec, def.out_channels, layer.passport_enabled, config,
                            seed, prefix);
            layer.has_branch = layer.passport_enabled && layer_has_branch_tensors(spec, config);
            ++norm_id;
        }
        shape = layer_output_shape(def, shape);
        m.layers.push_back(std::move(layer));
    }
    return m;
}

Tensor forward(Model& m, const Tensor& x, BranchMode branch, const PassportBundle* passports,
               bool training) {
    Tensor h = x;
    for (auto& layer : m.layers) {
        if (layer.def.op == LayerDef::Op::Conv) {
            h = conv2d(h, layer.weight, layer.def.stride, layer.def.pad);
        } else {
            h = matmul(h, layer.weight);
            if (layer.bias.defined())
                h = add(h, reshape(layer.bias, {1, layer.def.out_channels}));
        }

        if (layer.def.has_norm) {
            const bool aware = branch == BranchMode::PassportAware && layer.passport_enabled;
            if (!aware) {
                h = forward_passport_free(h, layer.norm, training);
            } else {
                if (!passports)
                    throw UsageError("passport-aware forward requires a passport bundle");
                const LayerPassport* lp = passports->find(layer.norm_id);
                if (!lp)
                    throw KeystoreError("no passport for norm layer " +
                                        std::to_string(layer.norm_id));
                const bool needs_branch = m.config != AblationConfig::SharedDirect &&
                                          (m.config == AblationConfig::Full ||
                                           m.spec.norm.algo == NormAlgo::Batch);
                if (needs_branch && !layer.has_branch)
                    throw UsageError("passport-aware forward on a deployment model "
                                     "(branch parameters were exported away)");
                switch (m.config) {
                    case AblationConfig::Full:
                        h = forward_passport_aware(h, layer.norm, *lp, layer.weight, training);
                        break;
                    case AblationConfig::IndependentDirect:
                        h = forward_passport_direct(h, layer.norm, *lp, layer.weight, training,
                                                    /*shared_stats=*/false);
                        break;
                    case AblationConfig::SharedDirect:
                        h = forward_passport_direct(h, layer.norm, *lp, layer.weight, training,
                                                    /*shared_stats=*/true);
                        break;
                }
            }
        }
        if (layer.def.act) h = leaky_relu(h, 0.01f);
        if (layer.def.pool) h = avg_pool2d(h, 2, 2);
        if (layer.def.global_pool) h = global_avg_pool(h);
    }
    return h;
}

Model clone_model(const Model& m) {
    Model out;
    out.spec = m.spec;
    out.config = m.config;
    out.build_seed = m.build_seed;
    out.layers.reserve(m.layers.size());
    for (const auto& layer : m.layers) {
        ModelLayer c;
        c.def = layer.def;
        c.norm_id = layer.norm_id;
        c.passport_enabled = layer.passport_enabled;
        c.has_branch = layer.has_branch;
        c.weight = layer.weight.clone();
        if (layer.bias.defined()) c.bias = layer.bias.clone();
        if (layer.def.has_norm) {
            const auto& s = layer.norm;
            auto& d = c.norm;
            d.kind = s.kind;
            d.channels = s.channels;
            d.momentum = s.momentum;
            d.gamma0 = s.gamma0.clone();
            d.beta0 = s.beta0.clone();
            if (s.running_mu0.defined()) d.running_mu0 = s.running_mu0.clone();
            if (s.running_var0.defined()) d.running_var0 = s.running_var0.clone();
            d.init0 = s.init0;
            if (s.running_mu1.defined()) d.running_mu1 = s.running_mu1.clone();
            if (s.running_var1.defined()) d.running_var1 = s.running_var1.clone();
            d.init1 = s.init1;
            if (s.w1_gamma.defined()) {
                d.w1_gamma = s.w1_gamma.clone();
                d.w2_gamma = s.w2_gamma.clone();
                d.w1_beta = s.w1_beta.clone();
                d.w2_beta = s.w2_beta.clone();
            }
        }
        out.layers.push_back(std::move(c));
    }
    return out;
}

Model export_deployment(const Model& m) {
    Model out = clone_model(m);
    for (auto& layer : out.layers) {
        if (!layer.def.has_norm) continue;
        layer.norm.w1_gamma = Tensor();
        layer.norm.w2_gamma = Tensor();
        layer.norm.w1_beta = Tensor();
        layer.norm.w2_beta = Tensor();
        layer.norm.running_mu1 = Tensor();
        layer.norm.running_var1 = Tensor();
        layer.norm.init1 = false;
        layer.has_branch = false;
    }
    return out;
}

BranchParams collect_branch(const Model& m) {
    BranchParams bp;
    bp.config = m.config;
    for (const auto& layer : m.layers) {
        if (!layer.def.has_norm || !layer.passport_enabled || !layer.has_branch) continue;
        BranchLayerParams p;
        p.layer_id = layer.norm_id;
        if (layer.norm.w1_gamma.defined()) {
            p.w1_gamma = layer.norm.w1_gamma.clone();
            p.w2_gamma = layer.norm.w2_gamma.clone();
            p.w1_beta = layer.norm.w1_beta.clone();
            p.w2_beta = layer.norm.w2_beta.clone();
        }
        if (layer.norm.running_mu1.defined()) {
            p.running_mu1 = layer.norm.running_mu1.clone();
            p.running_var1 = layer.norm.running_var1.clone();
            p.init1 = layer.norm.init1;
        }
        bp.layers.push_back(std::move(p));
    }
    return bp;
}

Model attach_branch(const Model& deployed, const BranchParams& branch,
                    const PassportBundle& passports) {
    Model out = clone_model(deployed);
    if (branch.config != out.config)
        throw KeystoreError("keystore was produced under config " + to_string(branch.config) +
                            ", model is config " + to_string(out.config));

    std::vector<int> enabled_ids;
    for (const auto& layer : out.layers)
        if (layer.def.has_norm && layer.passport_enabled) enabled_ids.push_back(layer.norm_id);
    if (enabled_ids.size() != branch.layers.size())
        throw KeystoreError("keystore holds " + std::to_string(branch.layers.size()) +
                            " branch layers, model has " + std::to_string(enabled_ids.size()) +
                            " passport-enabled layers");

    for (const auto& p : branch.layers) {
        ModelLayer* target = nullptr;
        for (auto& layer : out.layers)
            if (layer.def.has_norm && layer.norm_id == p.layer_id && layer.passport_enabled)
                target = &layer;
        if (!target)
            throw KeystoreError("keystore branch layer id " + std::to_string(p.layer_id) +
                                " not present in model");
        if (!passports.find(p.layer_id))
            throw KeystoreError("no passport for branch layer id " + std::to_string(p.layer_id));
        auto& st = target->norm;
        if (p.w1_gamma.defined()) {
            if (st.channels != p.w1_gamma.shape()[0])
                throw KeystoreError("branch pipeline width mismatch at layer " +
                                    std::to_string(p.layer_id));
            st.w1_gamma = p.w1_gamma.clone();
            st.w2_gamma = p.w2_gamma.clone();
            st.w1_beta = p.w1_beta.clone();
            st.w2_beta = p.w2_beta.clone();
        }
        if (p.running_mu1.defined()) {
            if (p.running_mu1.numel() != st.channels)
                throw KeystoreError("branch running-statistics length mismatch at layer " +
                                    std::to_string(p.layer_id));
            st.running_mu1 = p.running_mu1.clone();
            st.running_var1 = p.running_var1.clone();
            st.init1 = p.init1;
        }
        target->has_branch = true;
    }
    return out;
}

std::vector<PassportLayerInfo> passport_layer_infos(const ModelSpec& spec) {
    validate_spec(spec);
    std::vector<PassportLayerInfo> out;
    std::vector<int> shape = spec.input_shape;
    int norm_id = 0;
    for (const auto& def : spec.layers) {
        if (def.has_norm) {
            if (spec.passport_mask[norm_id]) {
                PassportLayerInfo info;
                info.layer_id = norm_id;
                info.mode = def.op == LayerDef::Op::Conv ? PrecedentKind::Conv : PrecedentKind::FC;
                info.input_shape = shape;
                info.channels = def.out_channels;
                out.push_back(std::move(info));
            }
            ++norm_id;
        }
        shape = layer_output_shape(def, shape);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> named_tensors(const Model& m) {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t li = 0; li < m.layers.size(); ++li) {
        const auto& layer = m.layers[li];
        const std::string prefix = "layer" + std::to_string(li);
        out.emplace_back(prefix + ".weight", layer.weight);
        if (layer.bias.defined()) out.emplace_back(prefix + ".bias", layer.bias);
        if (!layer.def.has_norm) continue;
        const auto& st = layer.norm;
        out.emplace_back(prefix + ".norm.gamma0", st.gamma0);
        out.emplace_back(prefix + ".norm.beta0", st.beta0);
        if (st.running_mu0.defined()) {
            out.emplace_back(prefix + ".norm.running_mu0", st.running_mu0);
            out.emplace_back(prefix + ".norm.running_var0", st.running_var0);
        }
        if (st.running_mu1.defined()) {
            out.emplace_back(prefix + ".norm.branch.running_mu1", st.running_mu1);
            out.emplace_back(prefix + ".norm.branch.running_var1", st.running_var1);
        }
        if (st.w1_gamma.defined()) {
            out.emplace_back(prefix + ".norm.branch.w1_gamma", st.w1_gamma);
            out.emplace_back(prefix + ".norm.branch.w2_gamma", st.w2_gamma);
            out.emplace_back(prefix + ".norm.branch.w1_beta", st.w1_beta);
            out.emplace_back(prefix + ".norm.branch.w2_beta", st.w2_beta);
        }
    }
    return out;
}

std::vector<Tensor> trainable_params(const Model& m, BranchMode branch) {
    std::vector<Tensor> params;
    for (const auto& layer : m.layers) {
        params.push_back(layer.weight);
        if (layer.bias.defined()) params.push_back(layer.bias);
        if (!layer.def.has_norm) continue;
        const bool enabled = layer.passport_enabled;
        if (branch == BranchMode::PassportFree || !enabled) {
            params.push_back(layer.norm.gamma0);
            params.push_back(layer.norm.beta0);
        }
        if (branch == BranchMode::PassportAware && enabled && layer.norm.w1_gamma.defined()) {
            params.push_back(layer.norm.w1_gamma);
            params.push_back(layer.norm.w2_gamma);
            params.push_back(layer.norm.w1_beta);
            params.push_back(layer.norm.w2_beta);
        }
    }
    return params;
}

}  // namespace passnorm
