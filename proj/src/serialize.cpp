// SPDX-License-Identifier: Apache-2.0

#include "passnorm/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace passnorm {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'A', 'S', 'N', 'O', 'R', 'M', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderSize = 8 + 4 + 8;

struct Container {
    json manifest;
    std::vector<char> payload;
};

void write_container(const std::string& path, json manifest,
                     const std::vector<std::pair<std::string, Tensor>>& tensors) {
    json dir = json::array();
    std::vector<char> payload;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const auto v = t.values();
        const std::uint64_t nbytes = v.size() * sizeof(float);
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = "f32";
        entry["offset"] = offset;
        entry["nbytes"] = nbytes;
        dir.push_back(std::move(entry));
        const std::size_t old = payload.size();
        payload.resize(old + nbytes);
        std::memcpy(payload.data() + old, v.data(), nbytes);
        offset += nbytes;
    }
    manifest["tensors"] = std::move(dir);
    const std::string text = manifest.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot open '" + path + "' for writing");
    out.write(kMagic, 8);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t mlen = text.size();
    out.write(reinterpret_cast<const char*>(&mlen), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw UsageError("write failed for '" + path + "'");
}

Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open '" + path + "' for reading");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());

    if (bytes.size() < kHeaderSize)
        throw FormatError("file truncated inside header", bytes.size());
    if (std::memcmp(bytes.data(), kMagic, 8) != 0)
        throw FormatError("bad magic, not a container file", 0);
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 8, 4);
    if (version != kVersion)
        throw FormatError("unsupported container version " + std::to_string(version), 8);
    std::uint64_t mlen;
    std::memcpy(&mlen, bytes.data() + 12, 8);
    if (kHeaderSize + mlen > bytes.size())
        throw FormatError("file truncated inside manifest", bytes.size());

    Container c;
    try {
        c.manifest = json::parse(bytes.begin() + kHeaderSize,
                                 bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + mlen));
    } catch (const json::exception&) {
        throw FormatError("manifest is not valid JSON", kHeaderSize);
    }
    c.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderSize + mlen), bytes.end());

    // Directory sanity: offsets in range and non-overlapping.
    if (!c.manifest.contains("tensors") || !c.manifest["tensors"].is_array())
        throw FormatError("manifest has no tensor directory", kHeaderSize);
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& e : c.manifest["tensors"]) {
        const std::uint64_t off = e.at("offset").get<std::uint64_t>();
        const std::uint64_t nb = e.at("nbytes").get<std::uint64_t>();
        if (e.at("dtype").get<std::string>() != "f32")
            throw FormatError("unsupported dtype for tensor '" +
                                  e.at("name").get<std::string>() + "'",
                              kHeaderSize + mlen + off);
        if (off + nb > c.payload.size())
            throw FormatError("tensor '" + e.at("name").get<std::string>() +
                                  "' extends past end of payload",
                              kHeaderSize + mlen + off);
        spans.emplace_back(off, nb);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i - 1].first + spans[i - 1].second > spans[i].first)
            throw FormatError("overlapping tensor payload spans",
                              kHeaderSize + mlen + spans[i].first);
    return c;
}

Tensor read_tensor(const Container& c, const json& entry) {
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t nb = entry.at("nbytes").get<std::uint64_t>();
    const std::int64_t n = numel_of(shape);
    if (nb != static_cast<std::uint64_t>(n) * sizeof(float))
        throw FormatError("tensor '" + entry.at("name").get<std::string>() +
                              "' byte length does not match its shape",
                          off);
    std::vector<float> data(static_cast<std::size_t>(n));
    std::memcpy(data.data(), c.payload.data() + off, nb);
    return Tensor::from_data(shape, std::move(data));
}

const json* find_entry(const json& dir, const std::string& name) {
    for (const auto& e : dir)
        if (e.at("name").get<std::string>() == name) return &e;
    return nullptr;
}

json norm_kind_json(const NormKind& k) {
    json j;
    switch (k.algo) {
        case NormAlgo::Batch: j["algo"] = "batch"; break;
        case NormAlgo::Group: j["algo"] = "group"; break;
        case NormAlgo::Instance: j["algo"] = "instance"; break;
        case NormAlgo::Layer: j["algo"] = "layer"; break;
    }
    j["groups"] = k.groups;
    j["eps"] = k.eps;
    return j;
}

NormKind norm_kind_from(const json& j) {
    NormKind k;
    const std::string algo = j.at("algo").get<std::string>();
    if (algo == "batch") k.algo = NormAlgo::Batch;
    else if (algo == "group") k.algo = NormAlgo::Group;
    else if (algo == "instance") k.algo = NormAlgo::Instance;
    else if (algo == "layer") k.algo = NormAlgo::Layer;
    else throw FormatError("unknown norm algo '" + algo + "'", 0);
    k.groups = j.at("groups").get<int>();
    k.eps = j.at("eps").get<float>();
    return k;
}

json model_json(const Model& m) {
    json j;
    j["config"] = to_string(m.config);
    j["build_seed"] = m.build_seed;
    j["num_classes"] = m.spec.num_classes;
    j["input_shape"] = m.spec.input_shape;
    j["momentum"] = m.spec.momentum;
    j["norm"] = norm_kind_json(m.spec.norm);
    j["passport_mask"] = m.spec.passport_mask;

    json layers = json::array();
    for (const auto& layer : m.layers) {
        json l;
        l["op"] = layer.def.op == LayerDef::Op::Conv ? "conv" : "fc";
        l["out"] = layer.def.out_channels;
        l["kernel"] = layer.def.kernel;
        l["stride"] = layer.def.stride;
        l["pad"] = layer.def.pad;
        l["norm"] = layer.def.has_norm;
        l["act"] = layer.def.act;
        l["pool"] = layer.def.pool;
        l["global_pool"] = layer.def.global_pool;
        l["bias"] = layer.def.bias;
        layers.push_back(std::move(l));
    }
    j["layers"] = std::move(layers);

    json norms = json::array();
    for (const auto& layer : m.layers) {
        if (!layer.def.has_norm) continue;
        json s;
        s["layer_id"] = layer.norm_id;
        s["groups"] = layer.norm.kind.groups;
        s["init0"] = layer.norm.init0;
        s["init1"] = layer.norm.init1;
        s["has_branch"] = layer.has_branch;
        norms.push_back(std::move(s));
    }
    j["norm_state"] = std::move(norms);
    return j;
}

Model model_from_json(const json& j) {
    ModelSpec spec;
    spec.num_classes = j.at("num_classes").get<int>();
    spec.input_shape = j.at("input_shape").get<std::vector<int>>();
    spec.momentum = j.at("momentum").get<float>();
    spec.norm = norm_kind_from(j.at("norm"));
    spec.passport_mask = j.at("passport_mask").get<std::vector<bool>>();
    for (const auto& l : j.at("layers")) {
        LayerDef def;
        def.op = l.at("op").get<std::string>() == "conv" ? LayerDef::Op::Conv : LayerDef::Op::FC;
        def.out_channels = l.at("out").get<int>();
        def.kernel = l.at("kernel").get<int>();
        def.stride = l.at("stride").get<int>();
        def.pad = l.at("pad").get<int>();
        def.has_norm = l.at("norm").get<bool>();
        def.act = l.at("act").get<bool>();
        def.pool = l.at("pool").get<bool>();
        def.global_pool = l.at("global_pool").get<bool>();
        def.bias = l.at("bias").get<bool>();
        spec.layers.push_back(def);
    }

    Model m = build_model(spec, ablation_from_string(j.at("config").get<std::string>()),
                          j.at("build_seed").get<std::uint64_t>());

    for (const auto& s : j.at("norm_state")) {
        const int norm_id = s.at("layer_id").get<int>();
        for (auto& layer : m.layers) {
            if (!layer.def.has_norm || layer.norm_id != norm_id) continue;
            layer.norm.init0 = s.at("init0").get<bool>();
            layer.norm.init1 = s.at("init1").get<bool>();
            const bool want_branch = s.at("has_branch").get<bool>();
            if (!want_branch && layer.has_branch) {
                layer.norm.w1_gamma = Tensor();
                layer.norm.w2_gamma = Tensor();
                layer.norm.w1_beta = Tensor();
                layer.norm.w2_beta = Tensor();
                layer.norm.running_mu1 = Tensor();
                layer.norm.running_var1 = Tensor();
                layer.has_branch = false;
            }
        }
    }
    return m;
}

}  // namespace

void save_checkpoint(const Model& m, const std::map<std::string, std::string>& experiment,
                     const std::string& path) {
    json manifest;
    manifest["kind"] = "checkpoint";
    manifest["model"] = model_json(m);
    manifest["experiment"] = experiment;
    write_container(path, std::move(manifest), named_tensors(m));
}

Checkpoint load_checkpoint(const std::string& path) {
    Container c = read_container(path);
    if (c.manifest.value("kind", "") != "checkpoint")
        throw FormatError("container is not a checkpoint", kHeaderSize);

    Checkpoint ck;
    ck.model = model_from_json(c.manifest.at("model"));
    if (c.manifest.contains("experiment"))
        ck.experiment = c.manifest.at("experiment").get<std::map<std::string, std::string>>();

    // The reconstructed skeleton and the directory must agree exactly.
    auto expected = named_tensors(ck.model);
    const auto& dir = c.manifest.at("tensors");
    if (dir.size() != expected.size())
        throw FormatError("tensor directory holds " + std::to_string(dir.size()) +
                              " tensors, model needs " + std::to_string(expected.size()),
                          kHeaderSize);
    for (auto& [name, handle] : expected) {
        const json* entry = find_entry(dir, name);
        if (!entry) throw FormatError("missing tensor '" + name + "'", kHeaderSize);
        Tensor loaded = read_tensor(c, *entry);
        if (loaded.shape() != handle.shape())
            throw FormatError("tensor '" + name + "' has unexpected shape", kHeaderSize);
        auto dst = handle.values_mut();
        auto src = loaded.values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return ck;
}

void save_keystore(const Keystore& ks, const std::string& path) {
    json manifest;
    manifest["kind"] = "keystore";
    manifest["owner_id"] = ks.bundle.owner_id;
    manifest["creation_seed"] = ks.bundle.creation_seed;
    manifest["config"] = to_string(ks.branch.config);
    json trig;
    trig["n"] = ks.trigger.n;
    trig["seed"] = ks.trigger.seed;
    trig["num_classes"] = ks.trigger.num_classes;
    trig["input_shape"] = ks.trigger.input_shape;
    manifest["trigger"] = std::move(trig);

    std::vector<std::pair<std::string, Tensor>> tensors;
    json layers = json::array();
    for (std::size_t i = 0; i < ks.bundle.layers.size(); ++i) {
        const auto& lp = ks.bundle.layers[i];
        const std::string prefix = "layer" + std::to_string(lp.layer_id);
        json l;
        l["layer_id"] = lp.layer_id;
        l["mode"] = lp.mode == PrecedentKind::Conv ? "conv" : "fc";
        l["target_gamma"] = ks.bundle.target_signs[i].gamma;
        l["target_beta"] = ks.bundle.target_signs[i].beta;
        tensors.emplace_back(prefix + ".p_gamma", lp.p_gamma);
        tensors.emplace_back(prefix + ".p_beta", lp.p_beta);

        const BranchLayerParams* bp = nullptr;
        for (const auto& cand : ks.branch.layers)
            if (cand.layer_id == lp.layer_id) bp = &cand;
        l["has_pipeline"] = bp && bp->w1_gamma.defined();
        l["has_running"] = bp && bp->running_mu1.defined();
        l["init1"] = bp ? bp->init1 : false;
        if (bp && bp->w1_gamma.defined()) {
            tensors.emplace_back(prefix + ".w1_gamma", bp->w1_gamma);
            tensors.emplace_back(prefix + ".w2_gamma", bp->w2_gamma);
            tensors.emplace_back(prefix + ".w1_beta", bp->w1_beta);
            tensors.emplace_back(prefix + ".w2_beta", bp->w2_beta);
        }
        if (bp && bp->running_mu1.defined()) {
            tensors.emplace_back(prefix + ".running_mu1", bp->running_mu1);
            tensors.emplace_back(prefix + ".running_var1", bp->running_var1);
        }
        layers.push_back(std::move(l));
    }
    manifest["layers"] = std::move(layers);
    write_container(path, std::move(manifest), tensors);
}

Keystore load_keystore(const std::string& path) {
    Container c = read_container(path);
    if (c.manifest.value("kind", "") != "keystore")
        throw FormatError("container is not a keystore", kHeaderSize);

    Keystore ks;
    ks.bundle.owner_id = c.manifest.at("owner_id").get<std::string>();
    ks.bundle.creation_seed = c.manifest.at("creation_seed").get<std::uint64_t>();
    ks.branch.config = ablation_from_string(c.manifest.at("config").get<std::string>());
    const auto& trig = c.manifest.at("trigger");
    ks.trigger.n = trig.at("n").get<int>();
    ks.trigger.seed = trig.at("seed").get<std::uint64_t>();
    ks.trigger.num_classes = trig.at("num_classes").get<int>();
    ks.trigger.input_shape = trig.at("input_shape").get<std::vector<int>>();

    const auto& dir = c.manifest.at("tensors");
    for (const auto& l : c.manifest.at("layers")) {
        LayerPassport lp;
        lp.layer_id = l.at("layer_id").get<int>();
        lp.mode = l.at("mode").get<std::string>() == "conv" ? PrecedentKind::Conv
                                                            : PrecedentKind::FC;
        const std::string prefix = "layer" + std::to_string(lp.layer_id);
        auto need = [&](const std::string& name) {
            const json* e = find_entry(dir, name);
            if (!e) throw FormatError("keystore missing tensor '" + name + "'", kHeaderSize);
            return read_tensor(c, *e);
        };
        lp.p_gamma = need(prefix + ".p_gamma");
        lp.p_beta = need(prefix + ".p_beta");

        SignTargets targets;
        targets.gamma = l.at("target_gamma").get<std::vector<int>>();
        targets.beta = l.at("target_beta").get<std::vector<int>>();

        BranchLayerParams bp;
        bp.layer_id = lp.layer_id;
        bp.init1 = l.at("init1").get<bool>();
        if (l.at("has_pipeline").get<bool>()) {
            bp.w1_gamma = need(prefix + ".w1_gamma");
            bp.w2_gamma = need(prefix + ".w2_gamma");
            bp.w1_beta = need(prefix + ".w1_beta");
            bp.w2_beta = need(prefix + ".w2_beta");
        }
        if (l.at("has_running").get<bool>()) {
            bp.running_mu1 = need(prefix + ".running_mu1");
            bp.running_var1 = need(prefix + ".running_var1");
        }
        ks.bundle.layers.push_back(std::move(lp));
        ks.bundle.target_signs.push_back(std::move(targets));
        ks.branch.layers.push_back(std::move(bp));
    }
    return ks;
}

void save_dataset(const Dataset& d, const std::string& path) {
    json manifest;
    manifest["kind"] = "dataset";
    manifest["num_classes"] = d.num_classes;
    manifest["split"] = d.split;
    manifest["labels"] = d.y;
    write_container(path, std::move(manifest), {{"X", d.X}});
}

Dataset load_dataset(const std::string& path) {
    Container c = read_container(path);
    if (c.manifest.value("kind", "") != "dataset")
        throw FormatError("container is not a dataset", kHeaderSize);
    Dataset d;
    d.num_classes = c.manifest.at("num_classes").get<int>();
    d.split = c.manifest.at("split").get<std::string>();
    d.y = c.manifest.at("labels").get<std::vector<int>>();
    const json* e = find_entry(c.manifest.at("tensors"), "X");
    if (!e) throw FormatError("dataset missing tensor 'X'", kHeaderSize);
    d.X = read_tensor(c, *e);
    if (d.X.shape()[0] != static_cast<int>(d.y.size()))
        throw FormatError("dataset sample/label count mismatch", kHeaderSize);
    return d;
}

nlohmann::json to_json(const VerificationReport& r) {
    json j;
    j["acc_deploy"] = r.acc_deploy;
    j["acc_correct"] = r.acc_correct;
    j["acc_forged_mean"] = r.acc_forged_mean;
    j["k_forgeries"] = r.k_forgeries;
    j["layer_match"] = r.layer_match;
    j["bit_rate"] = r.bit_rate;
    j["trigger_accuracy"] = r.trigger_accuracy;
    return j;
}

nlohmann::json to_json(const AttackReport& r) {
    json j;
    j["kind"] = r.kind;
    j["pre_task_acc"] = r.pre_task_acc;
    j["post_task_acc"] = r.post_task_acc;
    j["bit_detection"] = r.bit_detection;
    j["layer_detection"] = r.layer_detection;
    j["acc_initial_mean"] = r.acc_initial_mean;
    j["acc_optimized_mean"] = r.acc_optimized_mean;
    j["flip_fraction"] = r.flip_fraction;
    j["flip_achieved"] = r.flip_achieved;
    j["params"] = r.params;
    return j;
}

AttackReport attack_report_from_json(const nlohmann::json& j) {
    AttackReport r;
    r.kind = j.at("kind").get<std::string>();
    r.pre_task_acc = j.at("pre_task_acc").get<double>();
    r.post_task_acc = j.at("post_task_acc").get<double>();
    r.bit_detection = j.at("bit_detection").get<double>();
    r.layer_detection = j.at("layer_detection").get<double>();
    r.acc_initial_mean = j.at("acc_initial_mean").get<double>();
    r.acc_optimized_mean = j.at("acc_optimized_mean").get<double>();
    r.flip_fraction = j.at("flip_fraction").get<double>();
    r.flip_achieved = j.at("flip_achieved").get<double>();
    r.params = j.at("params").get<std::map<std::string, double>>();
    return r;
}

std::string history_lines(const TrainHistory& h) {
    std::ostringstream out;
    for (const auto& rec : h) {
        json j;
        j["epoch"] = rec.epoch;
        j["acc_free"] = std::isnan(rec.acc_free) ? json() : json(rec.acc_free);
        j["acc_aware"] = std::isnan(rec.acc_aware) ? json() : json(rec.acc_aware);
        j["hinge"] = rec.hinge;
        out << j.dump() << "\n";
    }
    return out.str();
}

TrainHistory history_from_lines(const std::string& text) {
    TrainHistory h;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        EpochRecord rec;
        rec.epoch = j.at("epoch").get<int>();
        rec.acc_free = j.at("acc_free").is_null() ? std::nan("") : j.at("acc_free").get<double>();
        rec.acc_aware =
            j.at("acc_aware").is_null() ? std::nan("") : j.at("acc_aware").get<double>();
        rec.hinge = j.at("hinge").get<double>();
        h.push_back(rec);
    }
    return h;
}

}  // namespace passnorm
