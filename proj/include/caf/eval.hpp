#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "caf/attacks.hpp"
#include "caf/cafd_train.hpp"
#include "caf/image_io.hpp"

namespace caf {

inline std::string fmt_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

struct EvalReport {
    std::string target_model_id = "clf";
    std::string defense_id = "none";
    std::string attack_kind = "none";
    json attack_echo; // null when no attack
    double clean_error = 0.0;   // same pipeline, clean inputs
    double error_rate = 0.0;    // vs ground-truth labels
    double fooling_rate = 0.0;  // prediction changed vs clean pipeline prediction
    double mean_delta = 0.0;
    double max_delta = 0.0;
    double mean_linf = 0.0;
    double max_linf = 0.0;
    double cam_residual = 0.0;
    std::int64_t n = 0;
    std::uint64_t seed = 0;

    static std::string csv_header() {
        return "target_model,defense,attack,epsilon,error_rate,clean_error,fooling_rate,mean_delta,max_delta,"
               "mean_linf,max_linf,cam_residual,n,seed";
    }
    std::string csv_row() const {
        const double eps = attack_echo.is_object() ? attack_echo.value("epsilon", 0.0) : 0.0;
        std::string row = target_model_id + "," + defense_id + "," + attack_kind + "," + fmt_g9(eps);
        for (double v : {error_rate, clean_error, fooling_rate, mean_delta, max_delta, mean_linf, max_linf,
                         cam_residual})
            row += "," + fmt_g9(v);
        row += "," + std::to_string(n) + "," + std::to_string(seed);
        return row;
    }
    json to_json() const {
        return {{"target_model", target_model_id},
                {"defense", defense_id},
                {"attack", attack_kind},
                {"attack_echo", attack_echo},
                {"error_rate", error_rate},
                {"clean_error", clean_error},
                {"fooling_rate", fooling_rate},
                {"mean_delta", mean_delta},
                {"max_delta", max_delta},
                {"mean_linf", mean_linf},
                {"max_linf", max_linf},
                {"cam_residual", cam_residual},
                {"n", n},
                {"seed", seed}};
    }
};

struct EvalOptions {
    std::string target_model_id = "clf";
    std::string defense_id = "none";
    std::uint64_t seed = 0;
    double cam_identity_tol = 1e-5;
};

namespace detail {
inline double error_against(const std::vector<int>& pred, const std::vector<int>& labels) {
    std::int64_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
    return static_cast<double>(wrong) / static_cast<double>(pred.size());
}
} // namespace detail

// Error/fooling rates of a (possibly defended) model under a (possibly
// absent) attack. Adaptive attacks are crafted against `craft_defense` when
// given, else against the defense itself (the fully-leaked scenario).
template <typename T>
EvalReport evaluate(CamClassifier<T>& m, const Dataset& ds, const AttackConfig* attack,
                    DenoiserNet<T>* defense, EvalOptions opts = {}, DenoiserNet<T>* craft_defense = nullptr) {
    const Tensor<T> x = to_float(ds.images).template cast<T>();

    EvalReport rep;
    rep.target_model_id = opts.target_model_id;
    rep.defense_id = defense ? opts.defense_id : "none";
    rep.n = ds.size();
    rep.seed = opts.seed;

    // CAM/GAP consistency is checked on every batch that passes through.
    {
        auto [logits, feats] = m.forward_eval(x);
        const auto classes = argmax_rows(logits);
        CafBatch<T> caf{caf_from_features(feats, gather_weight_rows(m.class_weights(), classes)), classes,
                        "natural"};
        rep.cam_residual = cam_identity_residual(logits, m.class_bias(), caf);
        if (rep.cam_residual > opts.cam_identity_tol)
            throw NumericalFaultError("evaluate: CAM identity residual " + fmt_g9(rep.cam_residual) +
                                      " exceeds " + fmt_g9(opts.cam_identity_tol));
    }

    const Tensor<T> x_clean_eval = defense ? defense->denoise(x) : x;
    const auto pred_clean = m.predict(x_clean_eval);
    rep.clean_error = detail::error_against(pred_clean, ds.labels);

    Tensor<T> x_att = x;
    if (attack) {
        AttackConfig cfg = *attack;
        cfg.seed = cfg.seed == 0 ? opts.seed : cfg.seed;
        DenoiserNet<T>* crafting = craft_defense ? craft_defense : defense;
        AttackResult<T> ar = run_attack(m, crafting, x, &ds.labels, cfg);
        rep.attack_kind = attack_kind_name(cfg.kind);
        rep.attack_echo = cfg.to_json();
        rep.mean_delta = ar.distances.mean();
        rep.max_delta = static_cast<double>(ar.distances.max());
        rep.max_linf = ar.max_linf;
        const std::int64_t chw = x.numel() / x.shape[0];
        double linf_sum = 0.0;
        for (std::int64_t i = 0; i < x.shape[0]; ++i) {
            double worst = 0.0;
            for (std::int64_t j = 0; j < chw; ++j)
                worst = std::max(worst, std::abs(static_cast<double>(ar.adversarial[i * chw + j]) -
                                                 static_cast<double>(x[i * chw + j])));
            linf_sum += worst;
        }
        rep.mean_linf = linf_sum / static_cast<double>(x.shape[0]);
        if (rep.max_linf > cfg.epsilon + 1e-6)
            throw NumericalFaultError("evaluate: attack exceeded its budget: " + fmt_g9(rep.max_linf) + " > " +
                                      fmt_g9(cfg.epsilon));
        x_att = std::move(ar.adversarial);
    }

    const Tensor<T> x_eval = defense ? defense->denoise(x_att) : x_att;
    const auto pred = m.predict(x_eval);
    rep.error_rate = detail::error_against(pred, ds.labels);
    std::int64_t flipped = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) flipped += pred[i] != pred_clean[i];
    rep.fooling_rate = static_cast<double>(flipped) / static_cast<double>(pred.size());
    return rep;
}

inline void write_reports_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    os << EvalReport::csv_header() << "\n";
    for (const auto& r : reports) os << r.csv_row() << "\n";
}

inline void write_reports_text(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    for (const auto& r : reports) {
        os << "model=" << r.target_model_id << " defense=" << r.defense_id << " attack=" << r.attack_kind;
        if (r.attack_echo.is_object()) os << " eps=" << fmt_g9(r.attack_echo.value("epsilon", 0.0));
        os << " error=" << fmt_g9(r.error_rate) << " clean_error=" << fmt_g9(r.clean_error)
           << " fooling=" << fmt_g9(r.fooling_rate) << " mean_delta=" << fmt_g9(r.mean_delta)
           << " max_linf=" << fmt_g9(r.max_linf) << " n=" << r.n << "\n";
    }
}

// ---------------------------------------------------------------------------
// Distance-vs-fooling trend
// ---------------------------------------------------------------------------

enum class StrengthAxis { kIterations, kEpsilon };

struct TrendRow {
    double strength = 0.0;
    double mean_delta = 0.0;
    double fooling_rate = 0.0;
};

// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        std::size_t i = 0;
        while (i < idx.size()) {
            std::size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da <= 0 || db <= 0) return 0.0;
    return num / std::sqrt(da * db);
}

// Mean feature distance and fooling rate across a grid of attack strengths
// (iteration counts or budgets). Strength 0 means no attack.
template <typename T>
std::vector<TrendRow> distance_fooling_experiment(CamClassifier<T>& m, const Dataset& ds,
                                                  const AttackConfig& base, StrengthAxis axis,
                                                  std::vector<double> strengths) {
    if (strengths.size() < 3)
        throw std::invalid_argument("distance_fooling_experiment: need at least 3 strength points, got " +
                                    std::to_string(strengths.size()));
    std::sort(strengths.begin(), strengths.end());
    const Tensor<T> x = to_float(ds.images).template cast<T>();

    std::vector<TrendRow> rows;
    for (double s : strengths) {
        TrendRow row;
        row.strength = s;
        if (s > 0.0) {
            AttackConfig cfg = base;
            if (axis == StrengthAxis::kIterations)
                cfg.iterations = static_cast<int>(std::lround(s));
            else
                cfg.epsilon = s;
            AttackResult<T> ar = run_attack(m, static_cast<DenoiserNet<T>*>(nullptr), x, &ds.labels, cfg);
            row.mean_delta = ar.mean_delta;
            row.fooling_rate = ar.fooling_rate();
        }
        rows.push_back(row);
    }
    return rows;
}

inline void write_trend_csv(const std::vector<TrendRow>& rows, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    os << "strength,mean_delta,fooling_rate\n";
    for (const auto& r : rows)
        os << fmt_g9(r.strength) << ',' << fmt_g9(r.mean_delta) << ',' << fmt_g9(r.fooling_rate) << '\n';
}

inline void write_trend_plot(const std::vector<TrendRow>& rows, const std::filesystem::path& path) {
    PlotSeries delta{"delta", {}, series_color(0)};
    PlotSeries fool{"fooling", {}, series_color(1)};
    double dmax = 1e-12;
    for (const auto& r : rows) dmax = std::max(dmax, r.mean_delta);
    for (const auto& r : rows) {
        delta.points.push_back({r.strength, r.mean_delta / dmax});
        fool.points.push_back({r.strength, r.fooling_rate});
    }
    write_png(render_line_plot("feature distance vs fooling", "attack strength", "normalized value",
                               {delta, fool}),
              path);
}

// ---------------------------------------------------------------------------
// Budget sweep (defended accuracy across epsilon)
// ---------------------------------------------------------------------------

struct SweepRow {
    std::string attack;
    double epsilon = 0.0;
    double defended_accuracy = 0.0;
};

template <typename T>
std::vector<SweepRow> budget_sweep(CamClassifier<T>& m, DenoiserNet<T>& denoiser, const Dataset& ds,
                                   const std::vector<AttackConfig>& attacks, std::vector<double> eps_grid) {
    std::sort(eps_grid.begin(), eps_grid.end());
    std::vector<SweepRow> rows;
    for (const auto& base : attacks) {
        for (double eps : eps_grid) {
            AttackConfig cfg = base;
            cfg.epsilon = eps;
            EvalOptions opts;
            opts.defense_id = "cafd";
            EvalReport rep = evaluate(m, ds, &cfg, &denoiser, opts);
            std::string name = attack_kind_name(cfg.kind);
            if (cfg.targeted) name += "_t";
            rows.push_back({name, eps, 1.0 - rep.error_rate});
        }
    }
    return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    os << "attack,epsilon,defended_accuracy\n";
    for (const auto& r : rows) os << r.attack << ',' << fmt_g9(r.epsilon) << ',' << fmt_g9(r.defended_accuracy) << '\n';
}

inline void write_sweep_plot(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
    std::vector<PlotSeries> series;
    std::map<std::string, std::size_t> index;
    for (const auto& r : rows) {
        auto [it, inserted] = index.try_emplace(r.attack, series.size());
        if (inserted) series.push_back({r.attack, {}, series_color(it->second)});
        series[it->second].points.push_back({r.epsilon, r.defended_accuracy});
    }
    write_png(render_line_plot("defended accuracy vs budget", "epsilon", "accuracy", series), path);
}

// ---------------------------------------------------------------------------
// Ablation (loss variants trained under shared seeds)
// ---------------------------------------------------------------------------

template <typename T>
struct AblationOutcome {
    std::string variant;
    json train_summary;
    std::vector<EvalReport> reports; // one per attack
    DenoiserNet<T> net;
};

inline CafdTrainConfig ablation_variant_config(const CafdTrainConfig& base, const std::string& variant) {
    CafdTrainConfig cfg = base;
    if (variant == "full") {
    } else if (variant == "no_adv") {
        cfg.drop_adv = true;
    } else if (variant == "no_caf") {
        cfg.drop_caf = true;
    } else if (variant == "msed") {
        cfg.variant = CafLossVariant::kMse;
    } else {
        throw std::invalid_argument("unknown ablation variant '" + variant + "'");
    }
    return cfg;
}

template <typename T>
std::vector<AblationOutcome<T>> ablation_run(const Dataset& train, const Dataset& val, const Dataset& eval_ds,
                                             CamClassifier<T>& backbone, const CafdTrainConfig& base,
                                             const std::vector<std::string>& variants,
                                             const std::vector<AttackConfig>& attacks) {
    std::vector<AblationOutcome<T>> out;
    for (const auto& variant : variants) {
        CafdTrainConfig cfg = ablation_variant_config(base, variant); // shared seed from base
        auto trained = train_cafd(train, val, backbone, cfg);
        AblationOutcome<T> oc;
        oc.variant = variant;
        oc.train_summary = trained.summary;
        oc.net = std::move(trained.net);
        for (const auto& atk : attacks) {
            EvalOptions opts;
            opts.defense_id = "cafd_" + variant;
            oc.reports.push_back(evaluate(backbone, eval_ds, &atk, &oc.net, opts));
        }
        out.push_back(std::move(oc));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-model transfer
// ---------------------------------------------------------------------------

template <typename T>
std::vector<EvalReport> cross_model_eval(DenoiserNet<T>& denoiser,
                                         std::vector<std::pair<std::string, CamClassifier<T>*>> targets,
                                         const Dataset& ds, const std::vector<AttackConfig>& attacks) {
    std::vector<EvalReport> reports;
    for (auto& [id, target] : targets) {
        for (const auto& atk : attacks) {
            EvalOptions opts;
            opts.target_model_id = id;
            opts.defense_id = "cafd";
            reports.push_back(evaluate(*target, ds, &atk, &denoiser, opts));
        }
    }
    return reports;
}

// ---------------------------------------------------------------------------
// CAM grids (adversarial / restored / CAM of restored)
// ---------------------------------------------------------------------------

template <typename T>
Image cam_grid(CamClassifier<T>& m, const Tensor<T>& natural, const Tensor<T>& adversarial,
               const Tensor<T>& restored, int scale = 4) {
    if (natural.shape != adversarial.shape || natural.shape != restored.shape)
        throw std::invalid_argument("cam_grid: batches must be aligned triplets");
    const std::int64_t n = natural.shape.at(0);
    auto caf = class_activation_features(m, restored, ClassSelect::self_argmax(), "restored");
    Tensor<T> heat = minmax_normalize(cam_map(caf));
    heat = bilinear_upsample(heat, natural.shape[2]);
    Tensor<T> heat4({n, 1, natural.shape[2], natural.shape[3]}, heat.data); // reshape to NCHW

    std::vector<std::vector<Image>> rows(3);
    for (std::int64_t i = 0; i < n; ++i) {
        rows[0].push_back(tensor_to_image(adversarial, i, scale));
        rows[1].push_back(tensor_to_image(restored, i, scale));
        rows[2].push_back(overlay_to_image(restored, heat4, i, scale));
    }
    return tile_grid(rows);
}

template <typename T>
void save_cam_grid(CamClassifier<T>& m, const Tensor<T>& natural, const Tensor<T>& adversarial,
                   const Tensor<T>& restored, const std::filesystem::path& path, int scale = 4) {
    write_png(cam_grid(m, natural, adversarial, restored, scale), path);
}

} // namespace caf
