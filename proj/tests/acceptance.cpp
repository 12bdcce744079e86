// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion, exercised on the two
// reference fixtures (ToyMLP on 4-class blobs, ToyCNN on 8-class oriented
// patterns) defined by configs/toy_mlp.cfg and configs/toy_cnn.cfg.
//
// Runs standalone; expects PASSNORM_CLI_PATH and PASSNORM_CONFIG_DIR from
// the build.

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "passnorm/attacks.hpp"
#include "passnorm/config.hpp"
#include "passnorm/ops.hpp"
#include "passnorm/selfcheck.hpp"
#include "passnorm/serialize.hpp"

using namespace passnorm;

namespace {

constexpr std::uint64_t kSeed = 7;

struct Fixture {
    ExperimentConfig ec;
    ModelSpec spec;
    Model model;
    PassportBundle bundle;
    Dataset train_set, val_set;
    TriggerSet trigger;
    TrainHistory history;
};

Fixture train_fixture(const std::string& config_file, AblationConfig ablation,
                      std::uint64_t seed, int epochs_override = 0, float ratio_override = 0.0f,
                      bool masked = true, float lambda1_override = -1.0f) {
    Fixture fx;
    fx.ec = experiment_from_file(std::string(PASSNORM_CONFIG_DIR) + "/" + config_file);
    fx.spec = model_spec_from(fx.ec);
    if (!masked)
        std::fill(fx.spec.passport_mask.begin(), fx.spec.passport_mask.end(), false);
    fx.model = build_model(fx.spec, ablation, seed);
    const auto infos = passport_layer_infos(fx.spec);
    if (!infos.empty()) fx.bundle = generate_passports(infos, fx.ec.owner, seed);
    fx.train_set = dataset_from(fx.ec, seed, "train");
    fx.val_set = dataset_from(fx.ec, seed, "val");
    fx.trigger = make_trigger_set(fx.ec.trigger_n, fx.spec.input_shape, fx.spec.num_classes, seed);
    TrainConfig cfg = train_config_from(fx.ec, seed);
    if (epochs_override > 0) cfg.epochs = epochs_override;
    if (ratio_override > 0.0f) cfg.passport_ratio = ratio_override;
    if (lambda1_override >= 0.0f) cfg.lambda1 = lambda1_override;
    fx.history = train(fx.model, fx.train_set, cfg.lambda1 > 0 ? &fx.trigger : nullptr,
                       infos.empty() ? nullptr : &fx.bundle, cfg);
    return fx;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

bool file_bytes_equal(const std::string& a, const std::string& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    return ba == bb;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PASSNORM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    return std::system(cmd.c_str());
}

struct Criterion {
    int id;
    std::string name;
    std::function<bool(std::string&)> run;
};

}  // namespace

int main() {
    std::setvbuf(stdout, nullptr, _IONBF, 0);

    std::fprintf(stderr, "[setup] training ToyMLP fixture (config C)...\n");
    Fixture mlp = train_fixture("toy_mlp.cfg", AblationConfig::Full, kSeed);
    std::fprintf(stderr, "[setup] training ToyCNN fixture (config C)...\n");
    Fixture cnn = train_fixture("toy_cnn.cfg", AblationConfig::Full, kSeed);

    const double mlp_dep = evaluate_accuracy(mlp.model, mlp.val_set, BranchMode::PassportFree, nullptr);
    const double mlp_cor = evaluate_accuracy(mlp.model, mlp.val_set, BranchMode::PassportAware, &mlp.bundle);
    const double cnn_dep = evaluate_accuracy(cnn.model, cnn.val_set, BranchMode::PassportFree, nullptr);
    const double cnn_cor = evaluate_accuracy(cnn.model, cnn.val_set, BranchMode::PassportAware, &cnn.bundle);

    std::vector<Criterion> criteria;

    criteria.push_back({1, "gradient correctness (ops + composed layer/loss, <1e-3)",
                        [&](std::string& msg) {
        const auto results = gradient_check_suite(kSeed, 1e-2);
        double worst = 0.0;
        std::string worst_name;
        for (const auto& [name, err] : results)
            if (err > worst) { worst = err; worst_name = name; }
        msg = std::to_string(results.size()) + " instances, max err " + pct(worst) + " (" +
              worst_name + ")";
        return results.size() >= 20 && worst < 1e-3;
    }});

    criteria.push_back({2, "signature embedding: zero hinge -> exact bit match, both fixtures",
                        [&](std::string& msg) {
        const double h_mlp = mlp.history.back().hinge;
        const double h_cnn = cnn.history.back().hinge;
        auto [lm_mlp, bits_mlp] = detect_signature(mlp.model, mlp.bundle, mlp.bundle.target_signs);
        auto [lm_cnn, bits_cnn] = detect_signature(cnn.model, cnn.bundle, cnn.bundle.target_signs);
        bool layers_ok = true;
        for (auto f : lm_mlp) layers_ok = layers_ok && f;
        for (auto f : lm_cnn) layers_ok = layers_ok && f;
        msg = "hinge mlp=" + pct(h_mlp) + " cnn=" + pct(h_cnn) + ", bit_rate mlp=" +
              pct(bits_mlp) + " cnn=" + pct(bits_cnn);
        return h_mlp == 0.0 && h_cnn == 0.0 && bits_mlp == 1.0 && bits_cnn == 1.0 && layers_ok;
    }});

    criteria.push_back({3, "fidelity gap: |deploy-verify| <= 2pt (C); config-A collapse >= 20pt",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[setup] training ToyCNN fixture (config A)...\n");
        Fixture cnn_a = train_fixture("toy_cnn.cfg", AblationConfig::SharedDirect, kSeed, 150);
        const double a_dep =
            evaluate_accuracy(cnn_a.model, cnn_a.val_set, BranchMode::PassportFree, nullptr);
        const double a_cor =
            evaluate_accuracy(cnn_a.model, cnn_a.val_set, BranchMode::PassportAware, &cnn_a.bundle);
        msg = "C: mlp " + pct(mlp_dep) + "/" + pct(mlp_cor) + ", cnn " + pct(cnn_dep) + "/" +
              pct(cnn_cor) + "; A(cnn) " + pct(a_dep) + "/" + pct(a_cor);
        const bool c_ok = std::abs(mlp_dep - mlp_cor) <= 0.02 && std::abs(cnn_dep - cnn_cor) <= 0.02;
        const bool a_ok = a_cor <= cnn_dep - 0.20;
        return c_ok && a_ok;
    }});

    criteria.push_back({4, "ambiguity attack I: random near chance, optimized <= 0.5 * correct",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[attack] forging 10 random passports on the CNN fixture...\n");
        Model ver = clone_model(cnn.model);
        const auto rep = ambiguity_attack_forge(ver, cnn.train_set, cnn.val_set, 10,
                                                cnn.ec.attack_steps, cnn.ec.attack_lr, kSeed);
        const double chance = 1.0 / cnn.val_set.num_classes;
        const double band = 3.0 * std::sqrt(chance * (1 - chance) / cnn.val_set.size());
        msg = "initial " + pct(rep.acc_initial_mean) + " (chance " + pct(chance) + " +/- " +
              pct(band) + "), optimized " + pct(rep.acc_optimized_mean) + " vs bound " +
              pct(0.5 * cnn_cor);
        return std::abs(rep.acc_initial_mean - chance) <= band &&
               rep.acc_optimized_mean <= 0.5 * cnn_cor;
    }});

    criteria.push_back({5, "ambiguity attack II: collapse at 10% flips, identity at 0%",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[attack] sign-flip attack at 0.1 and 0.0...\n");
        Model v1 = clone_model(cnn.model);
        const auto at10 = ambiguity_attack_flip(v1, cnn.bundle, 0.1, cnn.train_set, cnn.val_set,
                                                cnn.ec.attack_steps, cnn.ec.attack_lr, kSeed,
                                                cnn.ec.alpha0);
        Model v0 = clone_model(cnn.model);
        const auto at0 = ambiguity_attack_flip(v0, cnn.bundle, 0.0, cnn.train_set, cnn.val_set,
                                               cnn.ec.attack_steps, cnn.ec.attack_lr, kSeed,
                                               cnn.ec.alpha0);
        msg = "flip 0.1: acc " + pct(at10.post_task_acc) + " (achieved " +
              pct(at10.flip_achieved) + ") vs bound " + pct(0.5 * cnn_cor) + "; flip 0.0: acc " +
              pct(at0.post_task_acc) + " vs correct " + pct(cnn_cor);
        return at10.post_task_acc <= 0.5 * cnn_cor &&
               std::abs(at0.post_task_acc - cnn_cor) <= 0.01;
    }});

    criteria.push_back({6, "pruning: layer detection >= 90% at rate 0.5, sweep CSV to 0.9",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[attack] pruning sweeps on both fixtures...\n");
        const std::vector<double> rates = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
        bool ok = true;
        std::ostringstream detail;
        for (auto* fx : {&mlp, &cnn}) {
            Model dep = export_deployment(fx->model);
            const auto branch = collect_branch(fx->model);
            const auto rows = prune_sweep(dep, branch, fx->bundle, fx->val_set, rates);
            const std::string tag = fx == &mlp ? "mlp" : "cnn";
            std::ofstream csv("acceptance_prune_" + tag + ".csv");
            csv << "rate,accuracy,bit_detection,layer_detection\n";
            for (const auto& r : rows) {
                csv << r.rate << "," << r.verify_acc << "," << r.bit_detection << ","
                    << r.layer_detection << "\n";
                if (r.rate == 0.5) {
                    ok = ok && r.layer_detection >= 0.9;
                    detail << tag << "@0.5: layers " << pct(r.layer_detection) << " bits "
                           << pct(r.bit_detection) << "; ";
                }
                if (r.rate == 0.9)
                    detail << tag << "@0.9: bits " << pct(r.bit_detection) << "; ";
            }
        }
        msg = detail.str() + "CSV: acceptance_prune_{mlp,cnn}.csv";
        return ok;
    }});

    criteria.push_back({7, "fine-tuning: layer detection >= 90% after 30 cross-domain epochs",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[attack] 30-epoch cross-domain fine-tuning...\n");
        Model dep = export_deployment(cnn.model);
        Dataset new_train = dataset_from(cnn.ec, kSeed, "train", /*family=*/1);
        Dataset new_val = dataset_from(cnn.ec, kSeed, "val", /*family=*/1);
        auto [victim, rep] = finetune_attack(dep, new_train, new_val, cnn.ec.finetune_epochs,
                                             cnn.ec.finetune_lr, cnn.bundle, kSeed);
        msg = "new-task acc " + pct(rep.pre_task_acc) + " -> " + pct(rep.post_task_acc) +
              ", layers " + pct(rep.layer_detection) + ", bits " + pct(rep.bit_detection);
        return rep.layer_detection >= 0.9 && rep.post_task_acc > rep.pre_task_acc;
    }});

    criteria.push_back({8, "branch isolation: BN buffers bit-unchanged by the other branch",
                        [&](std::string& msg) {
        Fixture fresh;
        fresh.spec = mlp.spec;
        fresh.model = build_model(fresh.spec, AblationConfig::Full, 21);
        fresh.bundle = generate_passports(passport_layer_infos(fresh.spec), "alice", 21);
        Dataset d = mlp.train_set;
        TriggerSet trig = mlp.trigger;
        TrainConfig cfg = train_config_from(mlp.ec, 21);

        auto snapshot = [&](BranchMode branch) {
            std::vector<float> values;
            for (const auto& layer : fresh.model.layers) {
                if (!layer.def.has_norm) continue;
                const Tensor& mu = branch == BranchMode::PassportFree ? layer.norm.running_mu0
                                                                      : layer.norm.running_mu1;
                const Tensor& var = branch == BranchMode::PassportFree ? layer.norm.running_var0
                                                                       : layer.norm.running_var1;
                values.insert(values.end(), mu.values().begin(), mu.values().end());
                values.insert(values.end(), var.values().begin(), var.values().end());
            }
            return values;
        };

        Rng batch_rng = stream_for(21, "isolation");
        bool ok = true;
        for (int step = 0; step < 10; ++step) {
            const BranchMode active =
                step % 2 == 0 ? BranchMode::PassportAware : BranchMode::PassportFree;
            const BranchMode other =
                active == BranchMode::PassportAware ? BranchMode::PassportFree
                                                    : BranchMode::PassportAware;
            const auto before = snapshot(other);
            std::vector<int> idx(32);
            for (auto& v : idx) v = static_cast<int>(batch_rng.below(d.size()));
            Tensor bx = gather_rows(d.X, idx);
            const auto by = gather_labels(d.y, idx);
            Tensor loss = total_loss(fresh.model, bx, by, nullptr, nullptr, &fresh.bundle,
                                     [&] { auto c = cfg; c.lambda1 = 0; return c; }(), active);
            backward(loss);
            auto params = trainable_params(fresh.model, active);
            sgd_step(params, cfg.lr);
            ok = ok && snapshot(other) == before;
        }
        msg = ok ? "10 interleaved steps, inactive-branch buffers bit-identical"
                 : "buffer leak across branches";
        return ok;
    }});

    criteria.push_back({9, "structure preservation: export bit-exact, parameter set matches",
                        [&](std::string& msg) {
        Model dep = export_deployment(mlp.model);
        Rng rng(33);
        bool forward_ok = true;
        Model pre = clone_model(mlp.model);
        for (int i = 0; i < 100; ++i) {
            Tensor x = Tensor::randn({2, 16}, rng);
            Tensor a = forward(pre, x, BranchMode::PassportFree, nullptr, false);
            Tensor b = forward(dep, x, BranchMode::PassportFree, nullptr, false);
            for (std::int64_t j = 0; j < a.numel(); ++j)
                forward_ok = forward_ok && a.values()[j] == b.values()[j];
        }
        auto plain_spec = mlp.spec;
        std::fill(plain_spec.passport_mask.begin(), plain_spec.passport_mask.end(), false);
        Model plain = build_model(plain_spec, AblationConfig::Full, kSeed);
        auto names = [](const Model& m) {
            std::vector<std::string> out;
            for (const auto& [name, t] : named_tensors(m)) {
                std::ostringstream s;
                s << name << ":";
                for (int e : t.shape()) s << e << ",";
                out.push_back(s.str());
            }
            std::sort(out.begin(), out.end());
            return out;
        };
        const bool set_ok = names(dep) == names(plain);
        msg = std::string("forward bit-exact on 100 inputs: ") + (forward_ok ? "yes" : "NO") +
              ", parameter set matches plain build: " + (set_ok ? "yes" : "NO");
        return forward_ok && set_ok;
    }});

    criteria.push_back({10, "shared-statistics special case: direct forward equals baseline to 1e-6",
                        [&](std::string& msg) {
        Rng rng(55);
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            const bool conv = trial % 2 == 0;
            const int c = 8;
            for (NormAlgo algo : {NormAlgo::Batch, NormAlgo::Group, NormAlgo::Layer}) {
                PassportNormState st1;
                st1.kind = NormKind{algo, 4, 1e-5f};
                st1.channels = c;
                st1.gamma0 = Tensor::ones({c}, true);
                st1.beta0 = Tensor::zeros({c}, true);
                if (algo == NormAlgo::Batch) {
                    st1.running_mu0 = Tensor::zeros({c});
                    st1.running_var0 = Tensor::ones({c});
                }
                PassportNormState st2 = st1;
                st2.gamma0 = st1.gamma0.clone();
                st2.beta0 = st1.beta0.clone();
                if (algo == NormAlgo::Batch) {
                    st2.running_mu0 = st1.running_mu0.clone();
                    st2.running_var0 = st1.running_var0.clone();
                }
                LayerPassport lp;
                lp.mode = conv ? PrecedentKind::Conv : PrecedentKind::FC;
                Tensor W, x;
                if (conv) {
                    lp.p_gamma = Tensor::randn({2, 4, 4}, rng);
                    lp.p_beta = Tensor::randn({2, 4, 4}, rng);
                    W = Tensor::randn({c, 2, 3, 3}, rng);
                    x = Tensor::randn({4, c, 3, 3}, rng);
                } else {
                    lp.p_gamma = Tensor::randn({6}, rng);
                    lp.p_beta = Tensor::randn({6}, rng);
                    W = Tensor::randn({6, c}, rng);
                    x = Tensor::randn({8, c}, rng);
                }
                Tensor a = forward_passport_direct(x, st1, lp, W, true, /*shared_stats=*/true);
                Tensor b = forward_passport_baseline(x, st2, lp, W, true);
                for (std::int64_t i = 0; i < a.numel(); ++i)
                    worst = std::max(worst,
                                     double(std::abs(a.values()[i] - b.values()[i])));
            }
        }
        msg = "30 random layers (conv+fc, BN/GN/LN), max |diff| = " + pct(worst);
        return worst <= 1e-6;
    }});

    criteria.push_back({11, "trigger verification: watermarked >= 0.95, clean control at chance",
                        [&](std::string& msg) {
        const double marked =
            blackbox_verify(model_predictor(cnn.model), cnn.trigger);
        std::fprintf(stderr, "[setup] training a clean control CNN...\n");
        Fixture clean = train_fixture("toy_cnn.cfg", AblationConfig::Full, 555, 80, 0.0f,
                                      /*masked=*/false, /*lambda1=*/0.0f);
        const double control = blackbox_verify(model_predictor(clean.model), cnn.trigger);
        const double chance = 1.0 / cnn.spec.num_classes;
        const double band = 3.0 * std::sqrt(chance * (1 - chance) / cnn.trigger.size());
        msg = "watermarked " + pct(marked) + ", clean control " + pct(control) + " (chance " +
              pct(chance) + " +/- " + pct(band) + ")";
        return marked >= 0.95 && std::abs(control - chance) <= band;
    }});

    criteria.push_back({12, "ratio robustness: passport ratio 0.1 vs 0.5 within 2 points",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[setup] training ToyMLP at passport ratio 0.1...\n");
        Fixture low = train_fixture("toy_mlp.cfg", AblationConfig::Full, kSeed, 0, 0.1f);
        const double low_cor =
            evaluate_accuracy(low.model, low.val_set, BranchMode::PassportAware, &low.bundle);
        msg = "aware accuracy: ratio 0.5 -> " + pct(mlp_cor) + ", ratio 0.1 -> " + pct(low_cor);
        return std::abs(mlp_cor - low_cor) <= 0.02;
    }});

    criteria.push_back({13, "determinism and persistence: CLI pipelines byte-identical",
                        [&](std::string& msg) {
        std::fprintf(stderr, "[setup] running the seeded CLI pipeline twice...\n");
        const std::string base = "/tmp/passnorm_accept_" + std::to_string(::getpid());
        const std::string cfg_path = base + "_quick.cfg";
        {
            std::ofstream cfg(cfg_path);
            cfg << "arch = toy_mlp\nnorm = batch\nclasses = 4\ninput_dim = 16\nconfig = C\n"
                << "dataset = blobs\ntrain_n = 256\nval_n = 128\ntrigger_n = 50\nowner = alice\n"
                << "epochs = 30\nbatch = 32\nlr = 0.01\nlambda1 = 1.0\nlambda2 = 0.3\n"
                << "alpha0 = 2.0\nratio = 0.5\n";
        }
        for (const std::string run : {"1", "2"}) {
            const std::string dir = base + "_run" + run;
            if (std::system(("rm -rf " + dir + " && mkdir -p " + dir).c_str()) != 0) {
                msg = "could not prepare " + dir;
                return false;
            }
            if (run_cli("train --config " + cfg_path + " --seed 7 --out " + dir +
                        "/model.ckpt --keystore " + dir + "/owner.keys --history " + dir +
                        "/history.jsonl") != 0) { msg = "train failed in run " + run; return false; }
            if (run_cli("export --model " + dir + "/model.ckpt --out " + dir + "/deploy.ckpt") !=
                0) { msg = "export failed"; return false; }
            if (run_cli("verify-signature --model " + dir + "/model.ckpt --keystore " + dir +
                        "/owner.keys --report " + dir + "/sig.json") != 0) {
                msg = "verify-signature failed";
                return false;
            }
            if (run_cli("attack prune --model " + dir + "/deploy.ckpt --keystore " + dir +
                        "/owner.keys --sweep --csv " + dir + "/prune.csv") != 0) {
                msg = "attack prune failed";
                return false;
            }
        }
        bool ok = true;
        for (const std::string f :
             {"model.ckpt", "owner.keys", "history.jsonl", "deploy.ckpt", "sig.json", "prune.csv"})
            ok = ok && file_bytes_equal(base + "_run1/" + f, base + "_run2/" + f);

        // Checkpoint/keystore round trips: load and re-save bit-exactly.
        Checkpoint ck = load_checkpoint(base + "_run1/model.ckpt");
        save_checkpoint(ck.model, ck.experiment, base + "_roundtrip.ckpt");
        ok = ok && file_bytes_equal(base + "_run1/model.ckpt", base + "_roundtrip.ckpt");
        Keystore ks = load_keystore(base + "_run1/owner.keys");
        save_keystore(ks, base + "_roundtrip.keys");
        ok = ok && file_bytes_equal(base + "_run1/owner.keys", base + "_roundtrip.keys");

        // Deployment outputs carry no keystore tensor names.
        std::ifstream dep(base + "_run1/deploy.ckpt", std::ios::binary);
        std::string dep_bytes((std::istreambuf_iterator<char>(dep)),
                              std::istreambuf_iterator<char>());
        ok = ok && dep_bytes.find(".branch.") == std::string::npos &&
             dep_bytes.find("p_gamma") == std::string::npos;

        msg = ok ? "pipeline outputs byte-identical, round trips bit-exact, no secrets deployed"
                 : "byte mismatch in the pipeline outputs";
        return ok;
    }});

    int failures = 0;
    for (auto& criterion : criteria) {
        std::string msg;
        bool ok = false;
        try {
            ok = criterion.run(msg);
        } catch (const std::exception& e) {
            msg = std::string("exception: ") + e.what();
        }
        std::printf("[%s] criterion %02d: %s — %s\n", ok ? "PASS" : "FAIL", criterion.id,
                    criterion.name.c_str(), msg.c_str());
        if (!ok) ++failures;
    }

    // Informational only: the over-provisioned MLP/blob task does not show
    // the config-A collapse at desk scale (see the CNN fixture for the
    // asserted direction).
    std::printf("[info] deploy/verify (config C): mlp %s/%s, cnn %s/%s\n", pct(mlp_dep).c_str(),
                pct(mlp_cor).c_str(), pct(cnn_dep).c_str(), pct(cnn_cor).c_str());

    if (failures == 0) {
        std::printf("acceptance: all %zu criteria passed\n", criteria.size());
        return 0;
    }
    std::printf("acceptance: %d of %zu criteria FAILED\n", failures, criteria.size());
    return 1;
}
