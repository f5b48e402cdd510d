// Command-line front end: config-driven experiment runner with one
// subcommand per pipeline stage. Every command resolves its config, echoes
// it into the run directory, and writes artifacts atomically.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "caf/caf.hpp"

namespace fs = std::filesystem;
using namespace caf;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Config file (sectioned key = value text)");
    cmd->add_option("--set", args.overrides, "Override as section.key=value (repeatable)")->take_all();
    cmd->add_option("--seed", args.seed, "Override run.seed");
    cmd->add_option("--out", args.out_dir, "Override run.out_dir");
}

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_config(args.config_path);
    for (const auto& o : args.overrides) apply_override(cfg, o);
    if (args.seed) cfg.seed = *args.seed;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

void configure_threads(const RunConfig& cfg) {
    int n = cfg.threads;
    if (const char* env = std::getenv("CAF_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) n = n > 0 ? std::min(n, cap) : cap;
    }
    if (n > 0) set_gemm_threads(n);
}

struct RunDir {
    fs::path root;

    explicit RunDir(const RunConfig& cfg) : root(cfg.out_dir) {
        fs::create_directories(root / "checkpoints");
        fs::create_directories(root / "reports");
        fs::create_directories(root / "plots");
        fs::create_directories(root / "logs");
        write_text_atomic(serialize_config(cfg), root / "config.ini");
    }

    fs::path data_dir(const RunConfig& cfg) const {
        return cfg.dataset_dir.empty() ? root / "datasets" : fs::path(cfg.dataset_dir);
    }
    fs::path clf_path(const RunConfig& cfg) const {
        return cfg.clf_checkpoint.empty() ? root / "checkpoints" / "classifier.ckpt" : fs::path(cfg.clf_checkpoint);
    }
    fs::path denoiser_path(const RunConfig& cfg) const {
        return cfg.denoiser_checkpoint.empty() ? root / "checkpoints" / "denoiser.ckpt"
                                               : fs::path(cfg.denoiser_checkpoint);
    }
};

void log_line(const RunDir& dir, const std::string& command, const std::string& line) {
    std::cout << line << "\n";
    std::ofstream os(dir.root / "logs" / (command + ".log"), std::ios::app);
    os << line << "\n";
}

AttackConfig attack_from_config(const RunConfig& cfg) {
    AttackConfig a = cfg.attack;
    a.kind = attack_kind_from_name(cfg.attack_kind);
    a.validate();
    return a;
}

ClassifierArch arch_from_config(const RunConfig& cfg) {
    ClassifierArch arch;
    arch.image_size = cfg.dataset.image_size;
    arch.channels = cfg.dataset.channels;
    arch.num_classes = cfg.dataset.num_classes;
    arch.widths = cfg.clf_widths;
    arch.validate();
    return arch;
}

int cmd_gen_data(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    Dataset ds = generate_synthetic(cfg.dataset);
    auto parts = split(ds, {cfg.train_fraction, cfg.val_fraction, cfg.test_fraction}, cfg.seed);
    const char* names[3] = {"train", "val", "test"};
    for (int i = 0; i < 3; ++i) save_dataset(parts[i], dir.data_dir(cfg) / names[i]);
    log_line(dir, "gen-data",
             "generated " + std::to_string(ds.size()) + " images -> train/val/test = " +
                 std::to_string(parts[0].size()) + "/" + std::to_string(parts[1].size()) + "/" +
                 std::to_string(parts[2].size()) + " in " + dir.data_dir(cfg).string());
    return 0;
}

int cmd_train_clf(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    Dataset train = load_dataset(dir.data_dir(cfg) / "train");
    Dataset val = load_dataset(dir.data_dir(cfg) / "val");
    CamClassifier<float> m(arch_from_config(cfg), cfg.clf.seed);
    TrainStats stats = train_classifier(m, train, val, cfg.clf);
    json meta = {{"train_config", cfg.clf.to_json()},
                 {"final_train_acc", stats.final_train_acc},
                 {"final_val_acc", stats.final_val_acc},
                 {"seed", cfg.clf.seed}};
    save_classifier(m, meta, dir.clf_path(cfg));
    log_line(dir, "train-clf",
             "classifier trained: train_acc=" + fmt_g9(stats.final_train_acc) +
                 " val_acc=" + fmt_g9(stats.final_val_acc) + " -> " + dir.clf_path(cfg).string());
    return 0;
}

int cmd_train_denoiser(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    Dataset train = load_dataset(dir.data_dir(cfg) / "train");
    Dataset val = load_dataset(dir.data_dir(cfg) / "val");
    auto [m, clf_meta] = load_classifier<float>(dir.clf_path(cfg));
    const std::uint32_t checksum = classifier_file_checksum(dir.clf_path(cfg));

    auto result = train_cafd(train, val, m, cfg.cafd, checksum);
    write_curves_csv(result.curves, dir.root / "reports" / "denoiser_curves.csv");
    json meta = {{"backbone_checksum", checksum},
                 {"train_config", cfg.cafd.to_json()},
                 {"summary", result.summary},
                 {"seed", cfg.cafd.seed}};
    save_denoiser(result.net, result.disc ? &*result.disc : nullptr, meta, dir.denoiser_path(cfg));
    log_line(dir, "train-denoiser",
             "denoiser trained: val_delta " + fmt_g9(result.summary["initial_val_delta"].get<double>()) + " -> " +
                 fmt_g9(result.summary["final_val_delta"].get<double>()) + ", saved " +
                 dir.denoiser_path(cfg).string());
    return 0;
}

// Shared by eval-ish commands.
struct LoadedStack {
    Dataset test;
    CamClassifier<float> clf;
    std::optional<DenoiserCheckpoint<float>> defense;
    std::optional<DenoiserCheckpoint<float>> craft;
};

LoadedStack load_stack(const RunConfig& cfg, const RunDir& dir, bool want_denoiser) {
    LoadedStack s;
    Dataset full = load_dataset(dir.data_dir(cfg) / "test");
    s.test = cfg.eval_max_examples > 0 ? take(full, cfg.eval_max_examples) : full;
    auto [m, meta] = load_classifier<float>(dir.clf_path(cfg));
    s.clf = std::move(m);
    const fs::path dpath = dir.denoiser_path(cfg);
    if (want_denoiser || !cfg.denoiser_checkpoint.empty()) {
        if (fs::exists(dpath)) s.defense = load_denoiser<float>(dpath);
        else if (want_denoiser) throw std::runtime_error("denoiser checkpoint not found: " + dpath.string());
    }
    if (!cfg.craft_checkpoint.empty()) s.craft = load_denoiser<float>(cfg.craft_checkpoint);
    return s;
}

int cmd_attack(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    if (cfg.attack_kind == "none") throw ConfigError("attack command requires attack.kind != none");
    AttackConfig atk = attack_from_config(cfg);
    const bool adaptive = atk.kind == AttackKind::kBpda || atk.kind == AttackKind::kWhiteboxAdaptive;
    LoadedStack s = load_stack(cfg, dir, adaptive);

    const Tensor<float> x = to_float(s.test.images);
    DenoiserNet<float>* crafting = nullptr;
    if (adaptive) crafting = s.craft ? &s.craft->net : &s.defense->net;
    AttackResult<float> ar = run_attack(s.clf, crafting, x, &s.test.labels, atk);

    // Persist the adversarial set in dataset format for reuse.
    Dataset adv = s.test;
    adv.images = to_bytes(ar.adversarial);
    adv.meta["attack"] = atk.to_json();
    save_dataset(adv, dir.root / "adversarial" / attack_kind_name(atk.kind));

    EvalReport rep;
    rep.attack_kind = attack_kind_name(atk.kind);
    rep.attack_echo = atk.to_json();
    rep.fooling_rate = ar.fooling_rate();
    rep.mean_delta = ar.mean_delta;
    rep.max_delta = static_cast<double>(ar.distances.max());
    rep.max_linf = ar.max_linf;
    rep.mean_linf = ar.max_linf;
    rep.n = s.test.size();
    rep.seed = cfg.seed;
    write_reports_csv({rep}, dir.root / "reports" / "attack.csv");
    log_line(dir, "attack",
             "attack " + rep.attack_kind + ": fooling=" + fmt_g9(rep.fooling_rate) +
                 " mean_delta=" + fmt_g9(rep.mean_delta) + " max_linf=" + fmt_g9(rep.max_linf) + " n=" +
                 std::to_string(rep.n));
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    LoadedStack s = load_stack(cfg, dir, false);

    std::optional<AttackConfig> atk;
    if (cfg.attack_kind != "none") atk = attack_from_config(cfg);

    EvalOptions opts;
    opts.seed = cfg.seed;
    opts.defense_id = s.defense ? "cafd" : "none";
    EvalReport rep = evaluate(s.clf, s.test, atk ? &*atk : nullptr, s.defense ? &s.defense->net : nullptr, opts,
                              s.craft ? &s.craft->net : nullptr);
    write_reports_csv({rep}, dir.root / "reports" / "eval.csv");
    write_reports_text({rep}, dir.root / "reports" / "eval.txt");
    write_text_atomic(rep.to_json().dump(2) + "\n", dir.root / "reports" / "eval.json");
    log_line(dir, "eval",
             "eval: attack=" + rep.attack_kind + " defense=" + rep.defense_id + " error=" + fmt_g9(rep.error_rate) +
                 " clean_error=" + fmt_g9(rep.clean_error) + " fooling=" + fmt_g9(rep.fooling_rate) +
                 " mean_delta=" + fmt_g9(rep.mean_delta));
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    LoadedStack s = load_stack(cfg, dir, true);

    std::vector<AttackConfig> attacks;
    for (const auto& name : cfg.sweep_attacks) {
        AttackConfig a = cfg.attack;
        if (name == "pgd_ce_t") {
            a.kind = AttackKind::kPgdCe;
            a.targeted = true;
        } else {
            a.kind = attack_kind_from_name(name);
            a.targeted = false;
        }
        attacks.push_back(a);
    }
    auto rows = budget_sweep(s.clf, s.defense->net, s.test, attacks, cfg.sweep_eps_grid);
    write_sweep_csv(rows, dir.root / "reports" / "sweep.csv");
    write_sweep_plot(rows, dir.root / "plots" / "sweep.png");
    log_line(dir, "sweep", "budget sweep: " + std::to_string(rows.size()) + " rows -> reports/sweep.csv");
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    Dataset train = load_dataset(dir.data_dir(cfg) / "train");
    Dataset val = load_dataset(dir.data_dir(cfg) / "val");
    Dataset test = take(load_dataset(dir.data_dir(cfg) / "test"), cfg.eval_max_examples);
    auto [m, meta] = load_classifier<float>(dir.clf_path(cfg));
    const std::uint32_t checksum = classifier_file_checksum(dir.clf_path(cfg));

    AttackConfig cafa_atk = cfg.attack;
    cafa_atk.kind = AttackKind::kCafa;
    AttackConfig pgd_atk = cfg.attack;
    pgd_atk.kind = AttackKind::kPgdCe;
    auto outcomes = ablation_run(train, val, test, m, cfg.cafd, cfg.ablate_variants, {cafa_atk, pgd_atk});

    std::vector<EvalReport> reports;
    for (auto& oc : outcomes) {
        json dmeta = {{"backbone_checksum", checksum},
                      {"train_config", ablation_variant_config(cfg.cafd, oc.variant).to_json()},
                      {"summary", oc.train_summary},
                      {"variant", oc.variant}};
        save_denoiser(oc.net, static_cast<Discriminator<float>*>(nullptr), dmeta,
                      dir.root / "checkpoints" / ("denoiser_" + oc.variant + ".ckpt"));
        for (auto& r : oc.reports) reports.push_back(r);
        std::string line = "variant " + oc.variant + ":";
        for (const auto& r : oc.reports)
            line += " " + r.attack_kind + "_acc=" + fmt_g9(1.0 - r.error_rate);
        log_line(dir, "ablate", line);
    }
    write_reports_csv(reports, dir.root / "reports" / "ablation.csv");
    return 0;
}

int cmd_viz(const CommonArgs& args) {
    RunConfig cfg = resolve_config(args);
    configure_threads(cfg);
    RunDir dir(cfg);
    LoadedStack s = load_stack(cfg, dir, true);
    if (cfg.attack_kind == "none") throw ConfigError("viz command requires attack.kind != none");
    AttackConfig atk = attack_from_config(cfg);

    Dataset few = take(s.test, cfg.grid_examples);
    const Tensor<float> x = to_float(few.images);
    DenoiserNet<float>* crafting =
        (atk.kind == AttackKind::kBpda || atk.kind == AttackKind::kWhiteboxAdaptive) ? &s.defense->net : nullptr;
    AttackResult<float> ar = run_attack(s.clf, crafting, x, &few.labels, atk);
    const Tensor<float> restored = s.defense->net.denoise(ar.adversarial);

    save_cam_grid(s.clf, x, ar.adversarial, restored, dir.root / "plots" / "cam_grid.png");

    // Natural-vs-adversarial CAM pairs.
    auto caf_nat = class_activation_features(s.clf, x);
    auto caf_adv = class_activation_features(s.clf, ar.adversarial, ClassSelect::self_argmax(), "adversarial");
    const auto up = [&](const CafBatch<float>& caf) {
        Tensor<float> heat = bilinear_upsample(minmax_normalize(cam_map(caf)), x.shape[2]);
        return Tensor<float>({x.shape[0], 1, x.shape[2], x.shape[3]}, heat.data);
    };
    const Tensor<float> heat_nat = up(caf_nat), heat_adv = up(caf_adv);
    std::vector<std::vector<Image>> rows(4);
    for (std::int64_t i = 0; i < few.size(); ++i) {
        rows[0].push_back(tensor_to_image(x, i, 4));
        rows[1].push_back(overlay_to_image(x, heat_nat, i, 4));
        rows[2].push_back(tensor_to_image(ar.adversarial, i, 4));
        rows[3].push_back(overlay_to_image(ar.adversarial, heat_adv, i, 4));
    }
    write_png(tile_grid(rows), dir.root / "plots" / "cam_pairs.png");
    log_line(dir, "viz", "wrote plots/cam_grid.png and plots/cam_pairs.png");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"class activation feature attack & denoising defense toolkit"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* desc;
        int (*fn)(const CommonArgs&);
        CommonArgs args;
    };
    static Sub subs[] = {
        {"gen-data", "generate the synthetic shapes dataset and save train/val/test splits", cmd_gen_data, {}},
        {"train-clf", "train the CAM classifier backbone", cmd_train_clf, {}},
        {"train-denoiser", "train the denoiser against the frozen backbone", cmd_train_denoiser, {}},
        {"attack", "craft adversarial examples and persist them", cmd_attack, {}},
        {"eval", "evaluate error/fooling rates for a scenario", cmd_eval, {}},
        {"sweep", "defended accuracy across a perturbation-budget grid", cmd_sweep, {}},
        {"ablate", "train and evaluate the denoiser loss ablations", cmd_ablate, {}},
        {"viz", "render CAM grids for natural/adversarial/restored examples", cmd_viz, {}},
    };

    for (auto& sub : subs) {
        CLI::App* cmd = app.add_subcommand(sub.name, sub.desc);
        add_common(cmd, sub.args);
        cmd->callback([&sub] {
            const int rc = sub.fn(sub.args);
            if (rc != 0) throw CLI::RuntimeError(rc);
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
