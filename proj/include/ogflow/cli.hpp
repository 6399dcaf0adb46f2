#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ogflow/checks.hpp"
#include "ogflow/datagen.hpp"
#include "ogflow/evalkit.hpp"
#include "ogflow/network.hpp"
#include "ogflow/trainer.hpp"

// Command-line entry point: gen / train / eval / infer / gradcheck /
// selfcheck. Exit codes: 0 success, 2 usage, 3 I/O, 4 verification failure.

namespace ogflow::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct ModelOptions {
    int levels = 4;
    std::vector<std::size_t> points; // points per pyramid level (optional)
    std::vector<int> widths{64, 96, 192, 320};
    std::vector<int> cv_widths{32, 64, 128, 256};
    int d_oc = 64;
    int k1 = 32;
    int k2 = 64;
    int k_conv = 16;
    int k_up = 3;
    std::string cost_volume_mode = "occlusion_weighted";

    ModelConfig to_config() const {
        ModelConfig cfg;
        cfg.levels = levels;
        cfg.points_per_level = points;
        cfg.feature_widths = widths;
        cfg.cost_volume_widths = cv_widths;
        cfg.occ_width = d_oc;
        cfg.k1 = k1;
        cfg.k2 = k2;
        cfg.k_conv = k_conv;
        cfg.k_up = k_up;
        cfg.cost_volume_mode = cost_volume_mode_from_string(cost_volume_mode);
        cfg.validate();
        return cfg;
    }
};

inline json model_config_json(const ModelConfig& cfg) {
    json j;
    j["levels"] = cfg.levels;
    j["points_per_level"] = cfg.points_per_level;
    j["feature_widths"] = cfg.feature_widths;
    j["cost_volume_widths"] = cfg.cost_volume_widths;
    j["occ_width"] = cfg.occ_width;
    j["k1"] = cfg.k1;
    j["k2"] = cfg.k2;
    j["k_conv"] = cfg.k_conv;
    j["k_up"] = cfg.k_up;
    j["input_feature_dim"] = cfg.input_feature_dim;
    j["cost_volume_mode"] = to_string(cfg.cost_volume_mode);
    return j;
}

inline void echo_and_save_config(const json& resolved, const std::string& out_dir) {
    std::cout << "resolved config:\n" << resolved.dump(2) << "\n";
    if (!out_dir.empty()) {
        std::ofstream f(fs::path(out_dir) / "config.json");
        if (!f) throw IoError("cannot write config.json under " + out_dir);
        f << resolved.dump(2) << "\n";
    }
}

inline std::vector<std::string> list_pair_files(const std::string& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ogf1")
            files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no .ogf1 pair files in " + dir);
    return files;
}

inline std::pair<ModelConfig, ModelParams<float>> load_model(const std::string& ckpt_path) {
    Checkpoint<float> ck = load_checkpoint<float>(ckpt_path);
    ModelParams<float> params = ModelParams<float>::init(ck.config, 0);
    auto& entries = params.entries();
    if (entries.size() != ck.param_buffers.size())
        throw InconsistentFileError(ckpt_path + ": parameter count mismatch");
    for (std::size_t p = 0; p < entries.size(); ++p) {
        if (entries[p].name != ck.param_buffers[p].first)
            throw InconsistentFileError(ckpt_path + ": unexpected parameter " +
                                        ck.param_buffers[p].first);
        entries[p].value.data() = std::move(ck.param_buffers[p].second);
    }
    return {ck.config, std::move(params)};
}

inline json report_json(const MetricsReport& r) {
    json j;
    j["epe_full"] = r.epe_full;
    j["epe"] = r.epe;
    j["acc_05"] = r.acc_05;
    j["acc_10"] = r.acc_10;
    j["outliers"] = r.outliers;
    if (r.has_occ_accuracy) j["occ_accuracy"] = r.occ_accuracy;
    j["acc_population"] = r.acc_population;
    j["sample_count"] = r.sample_count;
    return j;
}

inline int print_check_results(const std::vector<checks::CheckResult>& results) {
    for (const auto& r : results)
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << "  value=" << r.value
                  << " threshold=" << r.threshold << "\n";
    return checks::all_pass(results) ? 0 : 4;
}

// ---------------------------------------------------------------------------

struct GenArgs {
    int scenes = 20;
    std::size_t points = 256;
    std::uint64_t seed = 0;
    double box = 1.5;
    double motion = 0.4;
    double min_occlusion = 0.1;
    int max_primitives = 4;
    std::string out;
};

inline int run_gen(const GenArgs& a) {
    SceneSpec spec;
    spec.num_points = a.points;
    spec.box_half_extent = a.box;
    spec.motion_scale = a.motion;
    spec.min_occlusion_fraction = a.min_occlusion;
    spec.max_primitives = a.max_primitives;
    spec.validate();
    fs::create_directories(a.out);

    json resolved;
    resolved["subcommand"] = "gen";
    resolved["scenes"] = a.scenes;
    resolved["points"] = a.points;
    resolved["seed"] = a.seed;
    resolved["box_half_extent"] = a.box;
    resolved["motion_scale"] = a.motion;
    resolved["min_occlusion_fraction"] = a.min_occlusion;
    resolved["max_primitives"] = a.max_primitives;
    resolved["out"] = a.out;
    echo_and_save_config(resolved, a.out);

    for (int i = 0; i < a.scenes; ++i) {
        auto pair = gen_scene<float>(spec, derive_seed(a.seed, 0x6E45CE, i));
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%05d.ogf1", i);
        write_pair(pair, (fs::path(a.out) / name).string());
    }
    std::cout << "wrote " << a.scenes << " pairs to " << a.out << "\n";
    return 0;
}

struct TrainArgs {
    std::string data;
    std::string out;
    std::string mode = "supervised";
    std::string resume;
    double val_fraction = 0.2;
    ModelOptions model;
    TrainConfig tcfg;
    std::vector<double> alpha;
    double lambda_f = 0.6;
    double lambda_oc = 1.0;
    SyntheticPairSpec synth;
};

inline int run_train(const TrainArgs& a) {
    ModelConfig mcfg = a.model.to_config();
    TrainConfig tcfg = a.tcfg;
    tcfg.validate();

    LossWeights<float> weights;
    weights.lambda_f = static_cast<float>(a.lambda_f);
    weights.lambda_oc = static_cast<float>(a.lambda_oc);
    weights.lambda_reg = static_cast<float>(tcfg.lambda_reg_start);
    if (!a.alpha.empty()) {
        weights.alpha.assign(a.alpha.begin(), a.alpha.end());
    } else {
        std::vector<float> paper{0.02f, 0.04f, 0.08f, 0.16f};
        weights.alpha.assign(paper.begin(), paper.begin() + std::min<std::size_t>(
                                                                 mcfg.levels, paper.size()));
        while (static_cast<int>(weights.alpha.size()) < mcfg.levels)
            weights.alpha.push_back(weights.alpha.back() * 2.0f);
    }

    const auto files = list_pair_files(a.data);
    std::vector<ScenePair<float>> all;
    for (const auto& f : files) all.push_back(read_pair(f));
    const std::size_t val_count = std::min(
        all.size() - 1,
        static_cast<std::size_t>(std::llround(a.val_fraction * static_cast<double>(all.size()))));
    std::vector<ScenePair<float>> train(all.begin(), all.end() - val_count);
    std::vector<ScenePair<float>> val(all.end() - val_count, all.end());

    const TrainMode mode = a.mode == "self" || a.mode == "self_supervised"
                               ? TrainMode::self_supervised
                               : TrainMode::supervised;
    if (a.mode != "supervised" && mode == TrainMode::supervised)
        throw ConfigError("train: unknown mode " + a.mode);

    fs::create_directories(a.out);
    json resolved;
    resolved["subcommand"] = "train";
    resolved["mode"] = mode == TrainMode::supervised ? "supervised" : "self_supervised";
    resolved["data"] = a.data;
    resolved["out"] = a.out;
    resolved["train_samples"] = train.size();
    resolved["val_samples"] = val.size();
    resolved["model"] = model_config_json(mcfg);
    resolved["epochs"] = tcfg.epochs;
    resolved["batch_size"] = tcfg.batch_size;
    resolved["max_steps"] = tcfg.max_steps;
    resolved["lr_initial"] = tcfg.lr_initial;
    resolved["lr_decay"] = tcfg.lr_decay;
    resolved["lr_decay_interval_epochs"] = tcfg.lr_decay_interval_epochs;
    resolved["seed"] = tcfg.rng_seed;
    resolved["deterministic"] = tcfg.deterministic;
    resolved["alpha"] = weights.alpha;
    resolved["lambda_f"] = weights.lambda_f;
    resolved["lambda_oc"] = weights.lambda_oc;
    resolved["lambda_reg_start"] = tcfg.lambda_reg_start;
    resolved["lambda_reg_end"] = tcfg.lambda_reg_end;
    resolved["synth_flow_epoch_fraction"] = tcfg.synth_flow_epoch_fraction;
    resolved["translation_magnitude"] = a.synth.translation_magnitude;
    resolved["centers"] = a.synth.num_centers;
    resolved["removal_fraction"] = a.synth.removal_fraction;
    echo_and_save_config(resolved, a.out);

    TrainSession<float> session(mode, mcfg, tcfg, weights, a.synth);
    session.set_data(&train, &val);
    if (!a.resume.empty()) session.load(a.resume);
    session.run();
    session.save((fs::path(a.out) / "checkpoint.ogck").string());

    json trace;
    trace["step_losses"] = session.step_losses();
    trace["epochs"] = json::array();
    for (const auto& st : session.epoch_stats()) {
        json e;
        e["epoch"] = st.epoch;
        e["mean_loss"] = st.mean_loss;
        if (st.has_val) e["val"] = report_json(st.val);
        if (st.synth_occ_accuracy >= 0.0) e["synth_occ_accuracy"] = st.synth_occ_accuracy;
        trace["epochs"].push_back(e);
    }
    std::ofstream tf(fs::path(a.out) / "trace.json");
    tf << trace.dump(2) << "\n";

    if (!val.empty()) {
        auto report = session.evaluate(val);
        std::cout << "final held-out metrics:\n" << to_text(report);
    }
    std::cout << "checkpoint written to " << (fs::path(a.out) / "checkpoint.ogck").string()
              << "\n";
    return 0;
}

struct EvalArgs {
    std::string data;
    std::string checkpoint;
    std::string pred;
    std::string out;
};

inline int run_eval(const EvalArgs& a) {
    if (a.checkpoint.empty() == a.pred.empty())
        throw ConfigError("eval: pass exactly one of --checkpoint or --pred");
    const auto files = list_pair_files(a.data);

    std::vector<MetricsReport> reports;
    ModelConfig mcfg;
    ModelParams<float> params;
    if (!a.checkpoint.empty()) std::tie(mcfg, params) = load_model(a.checkpoint);

    for (const auto& f : files) {
        auto pair = read_pair(f);
        if (!pair.gt_flow)
            throw ConfigError(f + ": pair carries no ground-truth flow, cannot evaluate");
        Tensor<float> pred_flow;
        Tensor<float> pred_occ;
        if (!a.checkpoint.empty()) {
            auto result = model_forward(pair.source, pair.target, params, mcfg);
            pred_flow = result.finest().flow.data();
            pred_occ = result.finest().occlusion.data();
            pred_occ.shape = Shape{pred_occ.numel()};
        } else {
            const fs::path pf =
                fs::path(a.pred) / (fs::path(f).stem().string() + ".pred.json");
            std::ifstream jf(pf);
            if (!jf) throw IoError("missing prediction file " + pf.string());
            json j = json::parse(jf);
            const auto& flow = j.at("flow");
            pred_flow = Tensor<float>(Shape{flow.size(), 3});
            for (std::size_t i = 0; i < flow.size(); ++i)
                for (int c = 0; c < 3; ++c) pred_flow.at2(i, c) = flow[i][c].get<float>();
            if (j.contains("occlusion")) {
                const auto& occ = j.at("occlusion");
                pred_occ = Tensor<float>(Shape{occ.size()});
                for (std::size_t i = 0; i < occ.size(); ++i) pred_occ.v[i] = occ[i].get<float>();
            }
        }
        Tensor<float> gt_occ = pair.gt_occlusion
                                   ? *pair.gt_occlusion
                                   : Tensor<float>::full(Shape{pair.source.size()}, 1.0f);
        MetricsReport r = flow_metrics(pred_flow, *pair.gt_flow, gt_occ);
        if (pair.gt_occlusion && pred_occ.numel() > 0) {
            r.occ_accuracy = occlusion_accuracy(pred_occ, *pair.gt_occlusion);
            r.has_occ_accuracy = true;
        }
        reports.push_back(r);
    }
    MetricsReport agg = aggregate(reports);
    std::cout << to_text(agg);
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream tf(fs::path(a.out) / "report.txt");
        tf << to_text(agg);
        std::ofstream jf(fs::path(a.out) / "report.json");
        jf << report_json(agg).dump(2) << "\n";
    }
    return 0;
}

struct InferArgs {
    std::string pair;
    std::string checkpoint;
    std::string out;
};

inline int run_infer(const InferArgs& a) {
    auto pair = read_pair(a.pair);
    auto [mcfg, params] = load_model(a.checkpoint);
    auto result = model_forward(pair.source, pair.target, params, mcfg);
    const Tensor<float>& flow = result.finest().flow.data();
    const Tensor<float>& occ = result.finest().occlusion.data();

    json j;
    j["source_points"] = pair.source.size();
    j["target_points"] = pair.target.size();
    j["flow"] = json::array();
    for (std::size_t i = 0; i < flow.shape[0]; ++i)
        j["flow"].push_back({flow.at2(i, 0), flow.at2(i, 1), flow.at2(i, 2)});
    j["occlusion"] = json::array();
    for (std::size_t i = 0; i < occ.shape[0]; ++i) j["occlusion"].push_back(occ.v[i * occ.shape[1]]);
    std::ofstream f(a.out);
    if (!f) throw IoError("infer: cannot write " + a.out);
    f << j.dump(2) << "\n";
    std::cout << "predictions written to " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

inline void add_model_options(CLI::App* cmd, ModelOptions& m) {
    cmd->add_option("--levels", m.levels, "Pyramid levels");
    cmd->add_option("--points", m.points, "Points per pyramid level (comma separated)")
        ->delimiter(',');
    cmd->add_option("--widths", m.widths, "Feature widths per level")->delimiter(',');
    cmd->add_option("--cv-widths", m.cv_widths, "Cost volume widths per level")->delimiter(',');
    cmd->add_option("--d-oc", m.d_oc, "Occlusion predictor width");
    cmd->add_option("--k1", m.k1, "Warped-target neighbors");
    cmd->add_option("--k2", m.k2, "Intra-source neighbors");
    cmd->add_option("--k-conv", m.k_conv, "Point convolution neighbors");
    cmd->add_option("--cost-volume-mode", m.cost_volume_mode,
                    "cross_only | self_only | masked_cross | occlusion_weighted");
}

inline int run(int argc, const char* const* argv) {
    CLI::App app{"3D scene flow and occlusion estimation on point clouds"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from an INI/TOML file");

    GenArgs gen;
    auto* cgen = app.add_subcommand("gen", "Generate procedural scene pairs (OGF1 files)");
    cgen->add_option("--scenes", gen.scenes, "Number of scenes");
    cgen->add_option("--points", gen.points, "Points per scene");
    cgen->add_option("--seed", gen.seed, "Base RNG seed");
    cgen->add_option("--box", gen.box, "Viewing box half extent (m)");
    cgen->add_option("--motion", gen.motion, "Max translation magnitude (m)");
    cgen->add_option("--min-occlusion", gen.min_occlusion, "Minimum occluded fraction");
    cgen->add_option("--max-primitives", gen.max_primitives, "Max rigid primitives");
    cgen->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs tr;
    auto* ctrain = app.add_subcommand("train", "Train a model on a directory of pairs");
    ctrain->add_option("--data", tr.data, "Directory of .ogf1 pairs")->required();
    ctrain->add_option("--out", tr.out, "Output directory")->required();
    ctrain->add_option("--mode", tr.mode, "supervised | self");
    ctrain->add_option("--resume", tr.resume, "Checkpoint to resume from");
    ctrain->add_option("--val-fraction", tr.val_fraction, "Held-out fraction");
    add_model_options(ctrain, tr.model);
    ctrain->add_option("--epochs", tr.tcfg.epochs, "Training epochs");
    ctrain->add_option("--batch", tr.tcfg.batch_size, "Batch size");
    ctrain->add_option("--max-steps", tr.tcfg.max_steps, "Stop after this many steps (0 = off)");
    ctrain->add_option("--lr", tr.tcfg.lr_initial, "Initial learning rate");
    ctrain->add_option("--lr-decay", tr.tcfg.lr_decay, "Decay factor per interval");
    ctrain->add_option("--lr-decay-interval", tr.tcfg.lr_decay_interval_epochs,
                       "Epochs per decay step");
    ctrain->add_option("--seed", tr.tcfg.rng_seed, "Training RNG seed");
    ctrain->add_flag("--deterministic", tr.tcfg.deterministic,
                     "Fixed FPS seeds, fully reproducible runs");
    ctrain->add_option("--alpha", tr.alpha, "Per-level loss weights, finest first")
        ->delimiter(',');
    ctrain->add_option("--lambda-f", tr.lambda_f, "Synthetic flow loss weight");
    ctrain->add_option("--lambda-oc", tr.lambda_oc, "Synthetic occlusion loss weight");
    ctrain->add_option("--lambda-reg", tr.tcfg.lambda_reg_start, "Smoothness weight (start)");
    ctrain->add_option("--lambda-reg-end", tr.tcfg.lambda_reg_end, "Smoothness weight (end)");
    ctrain->add_option("--synth-flow-fraction", tr.tcfg.synth_flow_epoch_fraction,
                       "Epoch fraction after which the synthetic flow loss is dropped");
    ctrain->add_option("--translation-magnitude", tr.synth.translation_magnitude,
                       "Synthetic pair translation (m)");
    ctrain->add_option("--centers", tr.synth.num_centers, "Synthetic removal centers");
    ctrain->add_option("--removal-fraction", tr.synth.removal_fraction,
                       "Removed fraction per center");

    EvalArgs ev;
    auto* ceval = app.add_subcommand("eval", "Evaluate a checkpoint or stored predictions");
    ceval->add_option("--data", ev.data, "Directory of .ogf1 pairs with ground truth")
        ->required();
    ceval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint");
    ceval->add_option("--pred", ev.pred, "Directory of *.pred.json predictions");
    ceval->add_option("--out", ev.out, "Directory for report.txt / report.json");

    InferArgs inf;
    auto* cinfer = app.add_subcommand("infer", "Predict flow and occlusion for one pair");
    cinfer->add_option("--pair", inf.pair, "Input .ogf1 pair")->required();
    cinfer->add_option("--checkpoint", inf.checkpoint, "Model checkpoint")->required();
    cinfer->add_option("--out", inf.out, "Output JSON path")->required();

    std::uint64_t check_seed = 0;
    auto* cgrad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    cgrad->add_option("--seed", check_seed, "RNG seed");
    auto* cself = app.add_subcommand("selfcheck", "Oracle-equivalence and invariant suites");
    cself->add_option("--seed", check_seed, "RNG seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (cgen->parsed()) return run_gen(gen);
        if (ctrain->parsed()) return run_train(tr);
        if (ceval->parsed()) return run_eval(ev);
        if (cinfer->parsed()) return run_infer(inf);
        if (cgrad->parsed()) {
            json resolved;
            resolved["subcommand"] = "gradcheck";
            resolved["seed"] = check_seed;
            std::cout << "resolved config:\n" << resolved.dump(2) << "\n";
            return print_check_results(checks::gradient_suite(check_seed));
        }
        if (cself->parsed()) {
            json resolved;
            resolved["subcommand"] = "selfcheck";
            resolved["seed"] = check_seed;
            std::cout << "resolved config:\n" << resolved.dump(2) << "\n";
            auto results = checks::oracle_suite(check_seed);
            for (auto& r : checks::blend_identity_suite(check_seed)) results.push_back(r);
            for (auto& r : checks::stopgrad_suite(check_seed)) results.push_back(r);
            for (auto& r : checks::synthetic_bookkeeping_suite(check_seed, 1000))
                results.push_back(r);
            return print_check_results(results);
        }
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace ogflow::cli
