// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "passnorm/data.hpp"
#include "passnorm/model.hpp"
#include "passnorm/train.hpp"

namespace passnorm {

// Flat key=value experiment description ('#' starts a comment). Unknown keys
// are rejected. The same map is embedded verbatim into checkpoint manifests
// so verification and attack commands can resynthesize the exact datasets.
struct ExperimentConfig {
    std::string arch = "toy_mlp";   // toy_mlp | toy_cnn
    std::string norm = "batch";     // batch | group | instance | layer
    int classes = 4;
    int input_dim = 16;             // toy_mlp
    int in_channels = 1;            // toy_cnn
    std::string config = "C";       // ablation A | B | C
    std::string mask = "all";       // all | none | comma-separated 0/1
    std::string dataset = "blobs";  // blobs | patterns
    int train_n = 512;
    int val_n = 256;
    int trigger_n = 100;
    std::string owner = "owner";

    int epochs = 0;
    int batch = 32;
    float lr = 0.02f;
    float lambda1 = 1.0f;
    float lambda2 = 0.3f;
    float alpha0 = 1.0f;
    float ratio = 0.5f;
    std::string schedule = "alternating";  // alternating | simultaneous

    int finetune_epochs = 30;
    float finetune_lr = 0.01f;
    int attack_steps = 500;
    float attack_lr = 0.01f;

    std::map<std::string, std::string> as_map() const;
};

ExperimentConfig experiment_from_map(const std::map<std::string, std::string>& kv);
ExperimentConfig experiment_from_file(const std::string& path);

ModelSpec model_spec_from(const ExperimentConfig& ec);
TrainConfig train_config_from(const ExperimentConfig& ec, std::uint64_t seed);

// Task data: family 0 = the training domain, family 1 = the disjoint
// fine-tuning domain.
Dataset dataset_from(const ExperimentConfig& ec, std::uint64_t seed, const std::string& split,
                     int family = 0);

}  // namespace passnorm
