// SPDX-License-Identifier: Apache-2.0
//
// The shared ToyMLP fixture: 4-class blobs, batch norm, full configuration.
// Trained once per test binary; matches configs/toy_mlp.cfg.

#pragma once

#include "passnorm/train.hpp"

namespace passnorm::testing {

struct MlpFixture {
    ModelSpec spec;
    Model model;
    PassportBundle bundle;
    Dataset train_set, val_set;
    TriggerSet trigger;
    TrainConfig cfg;
    TrainHistory history;
};

inline TrainConfig mlp_fixture_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.lambda1 = 1.0f;
    cfg.lambda2 = 0.3f;
    cfg.alpha0 = 2.0f;
    cfg.lr = 0.01f;
    cfg.batch_size = 32;
    cfg.seed = seed;
    return cfg;
}

inline const MlpFixture& trained_mlp() {
    static MlpFixture f = [] {
        MlpFixture fx;
        fx.spec = toy_mlp_spec(16, 4, NormKind{NormAlgo::Batch, 1, 1e-5f});
        fx.model = build_model(fx.spec, AblationConfig::Full, 7);
        fx.bundle = generate_passports(passport_layer_infos(fx.spec), "alice", 7);
        fx.train_set = make_blobs(512, 16, 4, 7, "train");
        fx.val_set = make_blobs(256, 16, 4, 7, "val");
        fx.trigger = make_trigger_set(100, fx.spec.input_shape, 4, 7);
        fx.cfg = mlp_fixture_config(7);
        fx.cfg.epochs = 250;
        fx.history = train(fx.model, fx.train_set, &fx.trigger, &fx.bundle, fx.cfg);
        return fx;
    }();
    return f;
}

}  // namespace passnorm::testing
