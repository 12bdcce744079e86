// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface: train/export/attach, the verification commands, the
// attack harness, dataset synthesis, gradient self-checks, and history
// reports. All randomness is controlled by the per-command --seed flag.
// Exit codes: 0 success, 1 verification-quantity computation failure,
// 2 usage or format error.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "passnorm/attacks.hpp"
#include "passnorm/config.hpp"
#include "passnorm/selfcheck.hpp"
#include "passnorm/serialize.hpp"

namespace {

using namespace passnorm;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot open '" + path + "' for writing");
    out << text;
}

void maybe_write_report(const std::string& path, const nlohmann::json& j) {
    if (!path.empty()) write_text(path, j.dump(2) + "\n");
}

std::uint64_t stored_seed(const Checkpoint& ck) {
    const auto it = ck.experiment.find("seed");
    if (it == ck.experiment.end())
        throw FormatError("checkpoint is missing the recorded training seed", 0);
    return std::stoull(it->second);
}

ExperimentConfig stored_experiment(const Checkpoint& ck) {
    return experiment_from_map(ck.experiment);
}

// Deployment checkpoints need the keystore branch re-attached before any
// passport-aware evaluation.
Model verification_model(const Checkpoint& ck, const Keystore& ks) {
    for (const auto& layer : ck.model.layers)
        if (layer.def.has_norm && layer.passport_enabled && layer.has_branch)
            return clone_model(ck.model);
    return attach_branch(ck.model, ks.branch, ks.bundle);
}

TriggerSet trigger_from(const Keystore& ks) {
    return make_trigger_set(ks.trigger.n, ks.trigger.input_shape, ks.trigger.num_classes,
                            ks.trigger.seed);
}

int cmd_dataset_gen(const std::string& config_path, std::uint64_t seed, const std::string& out,
                    const std::string& split, int family) {
    const auto ec = experiment_from_file(config_path);
    if (split != "train" && split != "val")
        throw UsageError("--split must be train or val");
    Dataset d = dataset_from(ec, seed, split, family);
    save_dataset(d, out);
    std::printf("dataset-gen: wrote %d samples (%d classes, %s split) to %s\n", d.size(),
                d.num_classes, d.split.c_str(), out.c_str());
    return 0;
}

int cmd_train(const std::string& config_path, std::uint64_t seed, const std::string& out,
              const std::string& keystore_path, const std::string& history_path,
              const std::string& owner_override) {
    auto ec = experiment_from_file(config_path);
    if (!owner_override.empty()) ec.owner = owner_override;

    const ModelSpec spec = model_spec_from(ec);
    Model model = build_model(spec, ablation_from_string(ec.config), seed);
    const auto infos = passport_layer_infos(spec);
    PassportBundle bundle;
    if (!infos.empty()) bundle = generate_passports(infos, ec.owner, seed);

    Dataset train_set = dataset_from(ec, seed, "train");
    TriggerSet trigger = make_trigger_set(ec.trigger_n, spec.input_shape, spec.num_classes, seed);
    TrainConfig cfg = train_config_from(ec, seed);

    TrainHistory history = train(model, train_set, &trigger, infos.empty() ? nullptr : &bundle, cfg);

    auto experiment = ec.as_map();
    experiment["seed"] = std::to_string(seed);
    save_checkpoint(model, experiment, out);

    if (!infos.empty()) {
        Keystore ks;
        ks.bundle = bundle;
        ks.branch = collect_branch(model);
        ks.trigger = TriggerInfo{ec.trigger_n, seed, spec.num_classes, spec.input_shape};
        save_keystore(ks, keystore_path);
    }
    if (!history_path.empty()) write_text(history_path, history_lines(history));

    if (!history.empty()) {
        const auto& last = history.back();
        std::printf("train: %d epochs, acc_free=%.4f acc_aware=%.4f hinge=%.6f\n",
                    (int)history.size(), last.acc_free, last.acc_aware, last.hinge);
    }
    std::printf("train: wrote %s%s%s\n", out.c_str(), infos.empty() ? "" : " and ",
                infos.empty() ? "" : keystore_path.c_str());
    return 0;
}

int cmd_export(const std::string& model_path, const std::string& out) {
    Checkpoint ck = load_checkpoint(model_path);
    Model dep = export_deployment(ck.model);
    save_checkpoint(dep, ck.experiment, out);
    std::printf("export: wrote deployment model to %s\n", out.c_str());
    return 0;
}

int cmd_attach(const std::string& model_path, const std::string& keystore_path,
               const std::string& out) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    Model ver = attach_branch(ck.model, ks.branch, ks.bundle);
    save_checkpoint(ver, ck.experiment, out);
    std::printf("attach: wrote verification model to %s\n", out.c_str());
    return 0;
}

int cmd_verify_fidelity(const std::string& model_path, const std::string& keystore_path,
                        std::uint64_t seed, int forgeries, const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    Model model = verification_model(ck, ks);
    const auto ec = stored_experiment(ck);
    Dataset val = dataset_from(ec, stored_seed(ck), "val");

    VerificationReport rep = fidelity_verify(model, ks.bundle, val, forgeries, seed);
    std::printf("fidelity: acc_deploy=%.4f acc_correct=%.4f", rep.acc_deploy, rep.acc_correct);
    if (forgeries > 0) std::printf(" acc_forged_mean=%.4f (k=%d)", rep.acc_forged_mean, forgeries);
    std::printf("\nsignature: bit_rate=%.4f layers=", rep.bit_rate);
    for (auto f : rep.layer_match) std::printf("%c", f ? '1' : '0');
    std::printf("\n");
    maybe_write_report(report_path, to_json(rep));
    return 0;
}

int cmd_verify_signature(const std::string& model_path, const std::string& keystore_path,
                         const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    auto [layer_match, bit_rate] = detect_signature(ck.model, ks.bundle, ks.bundle.target_signs);

    VerificationReport rep;
    rep.layer_match = layer_match;
    rep.bit_rate = bit_rate;
    std::printf("signature: bit_rate=%.4f per-layer=", bit_rate);
    for (auto f : layer_match) std::printf("%c", f ? '1' : '0');
    std::printf("\n");
    maybe_write_report(report_path, to_json(rep));
    return 0;
}

int cmd_verify_trigger(const std::string& model_path, const std::string& keystore_path,
                       const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    TriggerSet trigger = trigger_from(ks);
    // Query-only check against the deployed (passport-free) behavior.
    Model model = clone_model(ck.model);
    const double acc = blackbox_verify(model_predictor(model), trigger);

    VerificationReport rep;
    rep.trigger_accuracy = acc;
    std::printf("trigger: accuracy=%.4f over %d samples (chance %.4f)\n", acc, trigger.size(),
                1.0 / ks.trigger.num_classes);
    maybe_write_report(report_path, to_json(rep));
    return 0;
}

int cmd_attack_finetune(const std::string& model_path, const std::string& keystore_path,
                        std::uint64_t seed, int epochs, float lr, const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    const auto ec = stored_experiment(ck);
    const int e = epochs > 0 ? epochs : ec.finetune_epochs;
    const float l = lr > 0 ? lr : ec.finetune_lr;
    Dataset new_train = dataset_from(ec, seed, "train", /*family=*/1);
    Dataset new_val = dataset_from(ec, seed, "val", /*family=*/1);

    auto [model, rep] = finetune_attack(ck.model, new_train, new_val, e, l, ks.bundle, seed);
    std::printf("finetune: new-task acc %.4f -> %.4f | signature bits=%.4f layers=%.4f\n",
                rep.pre_task_acc, rep.post_task_acc, rep.bit_detection, rep.layer_detection);
    maybe_write_report(report_path, to_json(rep));
    return 0;
}

int cmd_attack_prune(const std::string& model_path, const std::string& keystore_path, double rate,
                     bool sweep, const std::string& csv_path, const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    const auto ec = stored_experiment(ck);
    Dataset val = dataset_from(ec, stored_seed(ck), "val");

    std::vector<double> rates;
    if (sweep)
        rates = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    else
        rates = {rate};

    const auto rows = prune_sweep(ck.model, ks.branch, ks.bundle, val, rates);
    std::string csv = "rate,accuracy,bit_detection,layer_detection\n";
    for (const auto& r : rows) {
        char line[128];
        std::snprintf(line, sizeof(line), "%.2f,%.6f,%.6f,%.6f\n", r.rate, r.verify_acc,
                      r.bit_detection, r.layer_detection);
        csv += line;
        std::printf("prune rate=%.2f: acc=%.4f bits=%.4f layers=%.4f\n", r.rate, r.verify_acc,
                    r.bit_detection, r.layer_detection);
    }
    if (!csv_path.empty()) write_text(csv_path, csv);
    if (!report_path.empty()) {
        nlohmann::json j;
        j["kind"] = "prune_sweep";
        j["rows"] = nlohmann::json::array();
        for (const auto& r : rows)
            j["rows"].push_back({{"rate", r.rate},
                                 {"accuracy", r.verify_acc},
                                 {"bit_detection", r.bit_detection},
                                 {"layer_detection", r.layer_detection}});
        maybe_write_report(report_path, j);
    }
    return 0;
}

int cmd_attack_ambiguity1(const std::string& model_path, const std::string& keystore_path,
                          std::uint64_t seed, int trials, int steps, float lr,
                          const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    Model model = verification_model(ck, ks);
    const auto ec = stored_experiment(ck);
    Dataset opt = dataset_from(ec, stored_seed(ck), "train");
    Dataset val = dataset_from(ec, stored_seed(ck), "val");
    const int s = steps > 0 ? steps : ec.attack_steps;
    const float l = lr > 0 ? lr : ec.attack_lr;

    AttackReport rep = ambiguity_attack_forge(model, opt, val, trials, s, l, seed);
    std::printf("ambiguity1: random-initial=%.4f optimized=%.4f over %d trials (chance %.4f)\n",
                rep.acc_initial_mean, rep.acc_optimized_mean, trials, rep.params.at("chance"));
    maybe_write_report(report_path, to_json(rep));
    return 0;
}

int cmd_attack_ambiguity2(const std::string& model_path, const std::string& keystore_path,
                          std::uint64_t seed, double flip, int steps, float lr,
                          const std::string& report_path) {
    Checkpoint ck = load_checkpoint(model_path);
    Keystore ks = load_keystore(keystore_path);
    Model model = verification_model(ck, ks);
    const auto ec = stored_experiment(ck);
    Dataset opt = dataset_from(ec, stored_seed(ck), "train");
    Dataset val = dataset_from(ec, stored_seed(ck), "val");
    const int s = steps > 0 ? steps : ec.attack_steps;
    const float l = lr > 0 ? lr : ec.attack_lr;

    AttackReport rep = ambiguity_attack_flip(model, ks.bundle, flip, opt, val, s, l, seed,
                                             ec.alpha0);
    std::printf("ambiguity2: flip=%.2f acc=%.4f flips-achieved=%.4f\n", rep.flip_fraction,
                rep.post_task_acc, rep.flip_achieved);
    maybe_write_report(report_path, to_json(rep));
    return 0;
}

int cmd_grad_check(std::uint64_t seed, double eps, double tolerance) {
    const auto results = gradient_check_suite(seed, eps);
    double worst = 0.0;
    std::string worst_name;
    for (const auto& [name, err] : results) {
        if (err > worst) {
            worst = err;
            worst_name = name;
        }
    }
    std::printf("grad-check: %zu instances, max relative error %.3e (%s)\n", results.size(),
                worst, worst_name.c_str());
    if (worst >= tolerance) {
        for (const auto& [name, err] : results)
            if (err >= tolerance) std::printf("  FAIL %-24s %.3e\n", name.c_str(), err);
        return 1;
    }
    return 0;
}

int cmd_report(const std::string& history_path) {
    std::ifstream in(history_path);
    if (!in) throw UsageError("cannot open history file '" + history_path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const TrainHistory hist = history_from_lines(text);
    if (hist.empty()) {
        std::printf("report: empty history\n");
        return 0;
    }
    std::printf("%6s  %10s  %10s  %12s\n", "epoch", "acc_free", "acc_aware", "hinge");
    for (const auto& rec : hist)
        std::printf("%6d  %10.4f  %10.4f  %12.6f\n", rec.epoch, rec.acc_free, rec.acc_aware,
                    rec.hinge);
    const auto& last = hist.back();
    std::printf("final: acc_free=%.4f acc_aware=%.4f hinge=%.6f after %zu epochs\n", last.acc_free,
                last.acc_aware, last.hinge, hist.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"passport-aware normalization: train, protect, verify, attack"};
    app.require_subcommand(1);

    std::string config_path, model_path, keystore_path, out_path, history_path, report_path;
    std::string split = "train", owner;
    std::string csv_path;
    std::uint64_t seed = 0;
    int forgeries = 10, trials = 10, steps = 0, epochs = 0, family = 0;
    double rate = -1.0, flip = 0.0, eps = 1e-2, tolerance = 1e-3;
    float lr = 0.0f;
    bool sweep = false;

    auto* ds = app.add_subcommand("dataset-gen", "synthesize a dataset file");
    ds->add_option("--config", config_path, "experiment config")->required();
    ds->add_option("--seed", seed, "generation seed")->required();
    ds->add_option("--out", out_path, "output dataset file")->required();
    ds->add_option("--split", split, "train or val");
    ds->add_option("--family", family, "0 = task domain, 1 = fine-tune domain");

    auto* tr = app.add_subcommand("train", "train a passport-protected model");
    tr->add_option("--config", config_path, "experiment config")->required();
    tr->add_option("--seed", seed, "master seed for all randomness")->required();
    tr->add_option("--out", out_path, "output checkpoint")->required();
    tr->add_option("--keystore", keystore_path, "output keystore (owner secrets)")->required();
    tr->add_option("--history", history_path, "optional history file (JSON lines)");
    tr->add_option("--owner", owner, "override the config owner id");

    auto* ex = app.add_subcommand("export", "strip passport branches for deployment");
    ex->add_option("--model", model_path, "input checkpoint")->required();
    ex->add_option("--out", out_path, "output deployment checkpoint")->required();

    auto* at = app.add_subcommand("attach", "re-attach the keystore branch");
    at->add_option("--model", model_path, "deployment checkpoint")->required();
    at->add_option("--keystore", keystore_path, "owner keystore")->required();
    at->add_option("--out", out_path, "output verification checkpoint")->required();

    auto* vf = app.add_subcommand("verify-fidelity", "fidelity verification");
    vf->add_option("--model", model_path)->required();
    vf->add_option("--keystore", keystore_path)->required();
    vf->add_option("--seed", seed, "seed for forged passports")->required();
    vf->add_option("--forgeries", forgeries, "number of forged bundles");
    vf->add_option("--report", report_path, "machine-readable report file");

    auto* vs = app.add_subcommand("verify-signature", "white-box signature detection");
    vs->add_option("--model", model_path)->required();
    vs->add_option("--keystore", keystore_path)->required();
    vs->add_option("--report", report_path);

    auto* vt = app.add_subcommand("verify-trigger", "black-box trigger verification");
    vt->add_option("--model", model_path)->required();
    vt->add_option("--keystore", keystore_path)->required();
    vt->add_option("--report", report_path);

    auto* ak = app.add_subcommand("attack", "removal and ambiguity attacks");
    ak->require_subcommand(1);

    auto* ft = ak->add_subcommand("finetune", "cross-domain fine-tuning attack");
    ft->add_option("--model", model_path, "deployment checkpoint")->required();
    ft->add_option("--keystore", keystore_path)->required();
    ft->add_option("--seed", seed)->required();
    ft->add_option("--epochs", epochs);
    ft->add_option("--lr", lr);
    ft->add_option("--report", report_path);

    auto* pr = ak->add_subcommand("prune", "global magnitude pruning attack");
    pr->add_option("--model", model_path, "deployment checkpoint")->required();
    pr->add_option("--keystore", keystore_path)->required();
    pr->add_option("--rate", rate, "single prune rate in [0,1]");
    pr->add_flag("--sweep", sweep, "sweep rates 0.1..0.9");
    pr->add_option("--csv", csv_path, "sweep CSV output");
    pr->add_option("--report", report_path);

    auto* a1 = ak->add_subcommand("ambiguity1", "forge passports from random values");
    a1->add_option("--model", model_path)->required();
    a1->add_option("--keystore", keystore_path)->required();
    a1->add_option("--seed", seed)->required();
    a1->add_option("--trials", trials);
    a1->add_option("--steps", steps);
    a1->add_option("--lr", lr);
    a1->add_option("--report", report_path);

    auto* a2 = ak->add_subcommand("ambiguity2", "flip signature signs from stolen passports");
    a2->add_option("--model", model_path)->required();
    a2->add_option("--keystore", keystore_path)->required();
    a2->add_option("--seed", seed)->required();
    a2->add_option("--flip", flip, "fraction of signature bits to flip")->required();
    a2->add_option("--steps", steps);
    a2->add_option("--lr", lr);
    a2->add_option("--report", report_path);

    auto* gc = app.add_subcommand("grad-check", "gradient self-check suite");
    gc->add_option("--seed", seed)->required();
    gc->add_option("--eps", eps, "finite-difference step");
    gc->add_option("--tolerance", tolerance, "max relative error allowed");

    auto* rp = app.add_subcommand("report", "print a training history");
    rp->add_option("--history", history_path)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (ds->parsed()) return cmd_dataset_gen(config_path, seed, out_path, split, family);
        if (tr->parsed()) return cmd_train(config_path, seed, out_path, keystore_path,
                                           history_path, owner);
        if (ex->parsed()) return cmd_export(model_path, out_path);
        if (at->parsed()) return cmd_attach(model_path, keystore_path, out_path);
        if (vf->parsed())
            return cmd_verify_fidelity(model_path, keystore_path, seed, forgeries, report_path);
        if (vs->parsed()) return cmd_verify_signature(model_path, keystore_path, report_path);
        if (vt->parsed()) return cmd_verify_trigger(model_path, keystore_path, report_path);
        if (ak->parsed()) {
            if (ft->parsed())
                return cmd_attack_finetune(model_path, keystore_path, seed, epochs, lr,
                                           report_path);
            if (pr->parsed()) {
                if (!sweep && (rate < 0.0 || rate > 1.0))
                    throw UsageError("attack prune: pass --rate in [0,1] or --sweep");
                return cmd_attack_prune(model_path, keystore_path, rate, sweep, csv_path,
                                        report_path);
            }
            if (a1->parsed())
                return cmd_attack_ambiguity1(model_path, keystore_path, seed, trials, steps, lr,
                                             report_path);
            if (a2->parsed())
                return cmd_attack_ambiguity2(model_path, keystore_path, seed, flip, steps, lr,
                                             report_path);
        }
        if (gc->parsed()) return cmd_grad_check(seed, eps, tolerance);
        if (rp->parsed()) return cmd_report(history_path);
        throw UsageError("no subcommand");
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const SpecError& e) {
        std::cerr << "spec error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return 1;
    }
}
