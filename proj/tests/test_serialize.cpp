// SPDX-License-Identifier: Apache-2.0
//
// Container format: round trips, corruption handling, determinism, and the
// deployment naming contract.

#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "passnorm/config.hpp"
#include "passnorm/ops.hpp"
#include "passnorm/serialize.hpp"

using namespace passnorm;

namespace {

NormKind bn() { return NormKind{NormAlgo::Batch, 1, 1e-5f}; }

std::string tmp_path(const std::string& name) {
    return "/tmp/passnorm_test_" + name;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Model small_trained_model(std::uint64_t seed) {
    auto spec = toy_mlp_spec(16, 4, bn());
    Model m = build_model(spec, AblationConfig::Full, seed);
    auto bundle = generate_passports(passport_layer_infos(spec), "alice", seed);
    Dataset d = make_blobs(128, 16, 4, seed, "train");
    TriggerSet trig = make_trigger_set(16, spec.input_shape, 4, seed);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = seed;
    cfg.lr = 0.01f;
    train(m, d, &trig, &bundle, cfg);
    return m;
}

bool same_model(const Model& a, const Model& b) {
    const auto ta = named_tensors(a);
    const auto tb = named_tensors(b);
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].first != tb[i].first) return false;
        if (ta[i].second.shape() != tb[i].second.shape()) return false;
        const auto va = ta[i].second.values();
        const auto vb = tb[i].second.values();
        for (std::size_t j = 0; j < va.size(); ++j)
            if (va[j] != vb[j]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact, including flags") {
    Model m = small_trained_model(7);
    const auto path = tmp_path("ck.ckpt");
    save_checkpoint(m, {{"seed", "7"}, {"note", "round trip"}}, path);
    Checkpoint back = load_checkpoint(path);
    CHECK(same_model(m, back.model));
    CHECK(back.experiment.at("note") == "round trip");
    CHECK(back.model.config == m.config);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (!m.layers[i].def.has_norm) continue;
        CHECK(back.model.layers[i].norm.init0 == m.layers[i].norm.init0);
        CHECK(back.model.layers[i].norm.init1 == m.layers[i].norm.init1);
        CHECK(back.model.layers[i].has_branch == m.layers[i].has_branch);
    }
    std::remove(path.c_str());
}

TEST_CASE("saving twice produces byte-identical files") {
    Model m = small_trained_model(11);
    const auto p1 = tmp_path("det1.ckpt");
    const auto p2 = tmp_path("det2.ckpt");
    save_checkpoint(m, {{"seed", "11"}}, p1);
    save_checkpoint(m, {{"seed", "11"}}, p2);
    CHECK(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("deployment checkpoints carry no branch-named tensors and are smaller") {
    Model m = small_trained_model(13);
    const auto full_path = tmp_path("full.ckpt");
    const auto dep_path = tmp_path("dep.ckpt");
    save_checkpoint(m, {}, full_path);
    Model dep = export_deployment(m);
    save_checkpoint(dep, {}, dep_path);

    const auto full_bytes = slurp(full_path);
    const auto dep_bytes = slurp(dep_path);
    CHECK(dep_bytes.size() < full_bytes.size());
    const std::string text(dep_bytes.begin(), dep_bytes.end());
    CHECK(text.find(".branch.") == std::string::npos);

    // Deployment checkpoint loads and reproduces passport-free outputs.
    Checkpoint back = load_checkpoint(dep_path);
    Rng rng(3);
    Tensor x = Tensor::randn({4, 16}, rng);
    Tensor a = forward(dep, x, BranchMode::PassportFree, nullptr, false);
    Tensor b = forward(back.model, x, BranchMode::PassportFree, nullptr, false);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.values()[i] == b.values()[i]);
    std::remove(full_path.c_str());
    std::remove(dep_path.c_str());
}

TEST_CASE("corrupted containers are rejected with a byte offset") {
    Model m = small_trained_model(17);
    const auto path = tmp_path("bad.ckpt");
    save_checkpoint(m, {}, path);
    const auto bytes = slurp(path);

    SUBCASE("truncated header") {
        spit(path, {bytes.begin(), bytes.begin() + 10});
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SUBCASE("truncated payload") {
        spit(path, {bytes.begin(), bytes.end() - 64});
        try {
            load_checkpoint(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() > 0);
        }
    }
    SUBCASE("bad magic") {
        auto corrupt = bytes;
        corrupt[0] = 'X';
        spit(path, corrupt);
        try {
            load_checkpoint(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 0);
        }
    }
    SUBCASE("unsupported version") {
        auto corrupt = bytes;
        corrupt[8] = 99;
        spit(path, corrupt);
        try {
            load_checkpoint(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(e.offset() == 8);
        }
    }
    SUBCASE("mangled manifest") {
        auto corrupt = bytes;
        corrupt[20] = '!';
        spit(path, corrupt);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    std::remove(path.c_str());
}

TEST_CASE("keystore round trip preserves passports, targets, and branch params") {
    auto spec = toy_mlp_spec(16, 4, bn());
    Model m = build_model(spec, AblationConfig::Full, 19);
    auto bundle = generate_passports(passport_layer_infos(spec), "carol", 19);

    Keystore ks;
    ks.bundle = bundle;
    ks.branch = collect_branch(m);
    ks.trigger = TriggerInfo{100, 19, 4, {16}};
    const auto path = tmp_path("ks.keys");
    save_keystore(ks, path);
    Keystore back = load_keystore(path);

    CHECK(back.bundle.owner_id == "carol");
    CHECK(back.bundle.creation_seed == 19);
    CHECK(back.trigger.n == 100);
    CHECK(back.trigger.input_shape == std::vector<int>{16});
    REQUIRE(back.bundle.layers.size() == bundle.layers.size());
    for (std::size_t i = 0; i < bundle.layers.size(); ++i) {
        CHECK(back.bundle.target_signs[i].gamma == bundle.target_signs[i].gamma);
        CHECK(back.bundle.target_signs[i].beta == bundle.target_signs[i].beta);
        const auto a = bundle.layers[i].p_gamma.values();
        const auto b = back.bundle.layers[i].p_gamma.values();
        REQUIRE(a.size() == b.size());
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    }
    REQUIRE(back.branch.layers.size() == ks.branch.layers.size());
    for (std::size_t i = 0; i < ks.branch.layers.size(); ++i) {
        const auto a = ks.branch.layers[i].w1_gamma.values();
        const auto b = back.branch.layers[i].w1_gamma.values();
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
    }

    // The round-tripped keystore re-attaches cleanly.
    Model dep = export_deployment(m);
    Model ver = attach_branch(dep, back.branch, back.bundle);
    CHECK(same_model(ver, m));
    std::remove(path.c_str());
}

TEST_CASE("keystore against a mismatched model spec is a keystore error") {
    auto spec = toy_mlp_spec(16, 4, bn());
    Model m = build_model(spec, AblationConfig::Full, 23);
    auto bundle = generate_passports(passport_layer_infos(spec), "alice", 23);
    Keystore ks;
    ks.bundle = bundle;
    ks.branch = collect_branch(m);
    ks.trigger = TriggerInfo{10, 23, 4, {16}};

    auto cnn_spec = toy_cnn_spec(1, 4, bn());
    Model other = export_deployment(build_model(cnn_spec, AblationConfig::Full, 23));
    CHECK_THROWS_AS(attach_branch(other, ks.branch, ks.bundle), KeystoreError);
}

TEST_CASE("dataset files round trip") {
    Dataset d = make_patterns(32, 4, 29, "val");
    const auto path = tmp_path("d.ds");
    save_dataset(d, path);
    Dataset back = load_dataset(path);
    CHECK(back.num_classes == 4);
    CHECK(back.split == "val");
    CHECK(back.y == d.y);
    for (std::int64_t i = 0; i < d.X.numel(); ++i)
        CHECK(back.X.values()[i] == d.X.values()[i]);
    std::remove(path.c_str());
}

TEST_CASE("training history lines round trip") {
    TrainHistory h;
    h.push_back({0, 0.5, 0.25, 12.75});
    h.push_back({1, 0.875, std::nan(""), 0.0});
    const std::string text = history_lines(h);
    const TrainHistory back = history_from_lines(text);
    REQUIRE(back.size() == 2);
    CHECK(back[0].acc_free == 0.5);
    CHECK(back[0].hinge == 12.75);
    CHECK(back[1].acc_free == 0.875);
    CHECK(std::isnan(back[1].acc_aware));
}

TEST_CASE("experiment configs parse, reject junk, and materialize specs") {
    const auto path = tmp_path("exp.cfg");
    {
        std::ofstream out(path);
        out << "# comment\narch = toy_cnn\nclasses = 8\nnorm = batch\nepochs = 5\n";
    }
    auto ec = experiment_from_file(path);
    CHECK(ec.arch == "toy_cnn");
    CHECK(ec.classes == 8);
    CHECK(ec.epochs == 5);
    auto spec = model_spec_from(ec);
    CHECK(spec.num_classes == 8);
    CHECK(spec.input_shape == std::vector<int>{1, 8, 8});

    {
        std::ofstream out(path);
        out << "arch = toy_cnn\nbogus_key = 1\n";
    }
    CHECK_THROWS_AS(experiment_from_file(path), UsageError);
    {
        std::ofstream out(path);
        out << "arch = toy_cnn\nepochs = banana\n";
    }
    CHECK_THROWS_AS(experiment_from_file(path), UsageError);
    std::remove(path.c_str());
}
