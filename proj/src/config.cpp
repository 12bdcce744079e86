// SPDX-License-Identifier: Apache-2.0

#include "passnorm/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace passnorm {
namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

float to_float(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const float f = std::stof(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return f;
    } catch (const std::exception&) {
        throw UsageError("config: bad numeric value '" + v + "' for key '" + key + "'");
    }
}

int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const int i = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw UsageError("config: bad integer value '" + v + "' for key '" + key + "'");
    }
}

std::string fmt(float v) {
    std::ostringstream out;
    out << v;
    return out.str();
}

}  // namespace

std::map<std::string, std::string> ExperimentConfig::as_map() const {
    return {
        {"arch", arch},
        {"norm", norm},
        {"classes", std::to_string(classes)},
        {"input_dim", std::to_string(input_dim)},
        {"in_channels", std::to_string(in_channels)},
        {"config", config},
        {"mask", mask},
        {"dataset", dataset},
        {"train_n", std::to_string(train_n)},
        {"val_n", std::to_string(val_n)},
        {"trigger_n", std::to_string(trigger_n)},
        {"owner", owner},
        {"epochs", std::to_string(epochs)},
        {"batch", std::to_string(batch)},
        {"lr", fmt(lr)},
        {"lambda1", fmt(lambda1)},
        {"lambda2", fmt(lambda2)},
        {"alpha0", fmt(alpha0)},
        {"ratio", fmt(ratio)},
        {"schedule", schedule},
        {"finetune_epochs", std::to_string(finetune_epochs)},
        {"finetune_lr", fmt(finetune_lr)},
        {"attack_steps", std::to_string(attack_steps)},
        {"attack_lr", fmt(attack_lr)},
    };
}

ExperimentConfig experiment_from_map(const std::map<std::string, std::string>& kv) {
    ExperimentConfig ec;
    for (const auto& [key, value] : kv) {
        if (key == "arch") ec.arch = value;
        else if (key == "norm") ec.norm = value;
        else if (key == "classes") ec.classes = to_int(key, value);
        else if (key == "input_dim") ec.input_dim = to_int(key, value);
        else if (key == "in_channels") ec.in_channels = to_int(key, value);
        else if (key == "config") ec.config = value;
        else if (key == "mask") ec.mask = value;
        else if (key == "dataset") ec.dataset = value;
        else if (key == "train_n") ec.train_n = to_int(key, value);
        else if (key == "val_n") ec.val_n = to_int(key, value);
        else if (key == "trigger_n") ec.trigger_n = to_int(key, value);
        else if (key == "owner") ec.owner = value;
        else if (key == "epochs") ec.epochs = to_int(key, value);
        else if (key == "batch") ec.batch = to_int(key, value);
        else if (key == "lr") ec.lr = to_float(key, value);
        else if (key == "lambda1") ec.lambda1 = to_float(key, value);
        else if (key == "lambda2") ec.lambda2 = to_float(key, value);
        else if (key == "alpha0") ec.alpha0 = to_float(key, value);
        else if (key == "ratio") ec.ratio = to_float(key, value);
        else if (key == "schedule") ec.schedule = value;
        else if (key == "finetune_epochs") ec.finetune_epochs = to_int(key, value);
        else if (key == "finetune_lr") ec.finetune_lr = to_float(key, value);
        else if (key == "attack_steps") ec.attack_steps = to_int(key, value);
        else if (key == "attack_lr") ec.attack_lr = to_float(key, value);
        else if (key == "seed") { /* recorded at train time, not a config knob */ }
        else throw UsageError("config: unknown key '" + key + "'");
    }
    return ec;
}

ExperimentConfig experiment_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: line " + std::to_string(lineno) + " is not key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw UsageError("config: empty key or value at line " + std::to_string(lineno));
        if (!kv.emplace(key, value).second)
            throw UsageError("config: duplicate key '" + key + "'");
    }
    return experiment_from_map(kv);
}

ModelSpec model_spec_from(const ExperimentConfig& ec) {
    NormKind kind;
    if (ec.norm == "batch") kind.algo = NormAlgo::Batch;
    else if (ec.norm == "group") kind.algo = NormAlgo::Group;
    else if (ec.norm == "instance") kind.algo = NormAlgo::Instance;
    else if (ec.norm == "layer") kind.algo = NormAlgo::Layer;
    else throw UsageError("config: unknown norm '" + ec.norm + "'");

    ModelSpec spec;
    if (ec.arch == "toy_mlp") {
        if (kind.algo == NormAlgo::Instance)
            throw UsageError("config: instance norm needs spatial inputs (toy_cnn)");
        spec = toy_mlp_spec(ec.input_dim, ec.classes, kind);
    } else if (ec.arch == "toy_cnn") {
        spec = toy_cnn_spec(ec.in_channels, ec.classes, kind);
    } else {
        throw UsageError("config: unknown arch '" + ec.arch + "'");
    }

    if (ec.mask == "all") {
        std::fill(spec.passport_mask.begin(), spec.passport_mask.end(), true);
    } else if (ec.mask == "none") {
        std::fill(spec.passport_mask.begin(), spec.passport_mask.end(), false);
    } else {
        std::vector<bool> mask;
        std::stringstream ss(ec.mask);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            tok = trim(tok);
            if (tok != "0" && tok != "1")
                throw UsageError("config: mask entries must be 0 or 1");
            mask.push_back(tok == "1");
        }
        if (mask.size() != spec.passport_mask.size())
            throw UsageError("config: mask has " + std::to_string(mask.size()) + " entries for " +
                             std::to_string(spec.passport_mask.size()) + " norm layers");
        spec.passport_mask = mask;
    }
    validate_spec(spec);
    return spec;
}

TrainConfig train_config_from(const ExperimentConfig& ec, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.lambda1 = ec.lambda1;
    cfg.lambda2 = ec.lambda2;
    cfg.alpha0 = ec.alpha0;
    cfg.lr = ec.lr;
    cfg.epochs = ec.epochs;
    cfg.batch_size = ec.batch;
    cfg.passport_ratio = ec.ratio;
    if (ec.schedule == "alternating") cfg.schedule = Schedule::Alternating;
    else if (ec.schedule == "simultaneous") cfg.schedule = Schedule::Simultaneous;
    else throw UsageError("config: unknown schedule '" + ec.schedule + "'");
    cfg.seed = seed;
    return cfg;
}

Dataset dataset_from(const ExperimentConfig& ec, std::uint64_t seed, const std::string& split,
                     int family) {
    const int n = split == "train" ? ec.train_n : ec.val_n;
    if (ec.dataset == "blobs") return make_blobs(n, ec.input_dim, ec.classes, seed, split, family);
    if (ec.dataset == "patterns") return make_patterns(n, ec.classes, seed, split, family);
    throw UsageError("config: unknown dataset '" + ec.dataset + "'");
}

}  // namespace passnorm
