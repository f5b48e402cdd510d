#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "caf/cam.hpp"
#include "caf/denoiser_net.hpp"

namespace caf {

// ---------------------------------------------------------------------------
// Loss family
// ---------------------------------------------------------------------------

// -log(sigmoid(lead - other)), batch-meaned, in the stable softplus form.
// The relativistic pair: the discriminator wants the natural score to lead,
// the denoiser wants the restored score to lead.
template <typename T>
Value<T> relativistic_pair_loss(const Value<T>& lead, const Value<T>& other) {
    return mean(softplus(sub(other, lead)));
}

template <typename T>
Value<T> loss_disc(Discriminator<T>& d, const Value<T>& x, const Value<T>& restored, bool training = true) {
    return relativistic_pair_loss(d.forward_graph(x, training), d.forward_graph(restored, training));
}

template <typename T>
Value<T> loss_adv(Discriminator<T>& d, const Value<T>& x, const Value<T>& restored, bool training = true) {
    return relativistic_pair_loss(d.forward_graph(restored, training), d.forward_graph(x, training));
}

// Feature-space restoration loss: mean_n Delta(Phi_x, Phi_restored), with
// the class row picked by the natural example's prediction.
template <typename T>
Value<T> loss_caf_phi(CamClassifier<T>& p, const Tensor<T>& x_natural, const Value<T>& restored) {
    auto [logits_nat, feats_nat] = p.forward_eval(x_natural);
    const auto classes = argmax_rows(logits_nat);
    const Tensor<T> rows = gather_weight_rows(p.class_weights(), classes);
    const Tensor<T> phi_nat = caf_from_features(feats_nat, rows);

    FrozenGuard<T> guard(p.state());
    auto out = p.forward_graph(restored, false);
    return mean(feature_distance_graph(phi_nat, out.features, rows));
}

// Split variant: distance of raw deep features plus distance of the selected
// class-weight rows. The weight rows are fixed parameters chosen by argmax,
// so the second term is piecewise constant and contributes value but no
// gradient; training signal flows through the feature term only.
template <typename T>
Value<T> loss_caf_featweight(CamClassifier<T>& p, const Tensor<T>& x_natural, const Value<T>& restored) {
    auto [logits_nat, feats_nat] = p.forward_eval(x_natural);
    const auto classes_nat = argmax_rows(logits_nat);

    FrozenGuard<T> guard(p.state());
    auto out = p.forward_graph(restored, false);

    Value<T> feat_diff = sub(out.features, Value<T>::constant(feats_nat));
    Value<T> feat_dist = mean(sqrt_guarded(sum_per_example(square(feat_diff)), T(1e-24)));

    const auto classes_res = argmax_rows(out.logits.val());
    const Tensor<T>& w = p.class_weights();
    const std::int64_t k = w.shape.at(1);
    double wterm = 0.0;
    for (std::size_t i = 0; i < classes_nat.size(); ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double d = static_cast<double>(w.at(classes_nat[i], j)) - static_cast<double>(w.at(classes_res[i], j));
            s += d * d;
        }
        wterm += std::sqrt(s);
    }
    wterm /= static_cast<double>(classes_nat.size());
    return add_scalar(feat_dist, static_cast<T>(wterm));
}

// Pixel-wise mean squared error (the MSED ablation's restoration loss).
template <typename T>
Value<T> mse_loss(const Tensor<T>& x_natural, const Value<T>& restored) {
    return mean(square(sub(restored, Value<T>::constant(x_natural))));
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class CafLossVariant { kPhi, kFeatWeight, kMse };

inline std::string caf_loss_name(CafLossVariant v) {
    switch (v) {
        case CafLossVariant::kPhi: return "phi";
        case CafLossVariant::kFeatWeight: return "feat_weight";
        case CafLossVariant::kMse: return "mse";
    }
    return "?";
}
inline CafLossVariant caf_loss_from_name(const std::string& s) {
    if (s == "phi") return CafLossVariant::kPhi;
    if (s == "feat_weight") return CafLossVariant::kFeatWeight;
    if (s == "mse") return CafLossVariant::kMse;
    throw std::invalid_argument("unknown denoiser loss variant '" + s + "'");
}

struct CafdTrainConfig {
    CafLossVariant variant = CafLossVariant::kPhi;
    double lambda1 = 100.0;
    double lambda2 = 5e-3;
    bool drop_adv = false; // ablation: no adversarial loss, no discriminator
    bool drop_caf = false; // ablation: adversarial loss only
    std::vector<int> widths = {32, 64, 128};

    double inner_epsilon = 8.0 / 255.0;
    double inner_step_size = 2.0 / 255.0;
    int inner_iterations = 5;

    int epochs = 4;
    int batch_size = 32;
    double lr = 1e-3;
    double lr_final = 2.7e-5;
    std::uint64_t seed = 5;

    int early_stop_patience = 5;
    double early_stop_min_improve = 0.01;
    std::uint32_t expected_backbone_checksum = 0; // 0 = not enforced

    void validate() const {
        if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("cafd: lambdas must be >= 0");
        if (drop_adv && drop_caf) throw std::invalid_argument("cafd: cannot drop both loss terms");
        if (epochs < 1 || batch_size < 1) throw std::invalid_argument("cafd: invalid schedule");
    }

    json to_json() const {
        return {{"loss", caf_loss_name(variant)},
                {"lambda1", lambda1},
                {"lambda2", lambda2},
                {"drop_adv", drop_adv},
                {"drop_caf", drop_caf},
                {"widths", widths},
                {"inner_epsilon", inner_epsilon},
                {"inner_step_size", inner_step_size},
                {"inner_iterations", inner_iterations},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"lr_final", lr_final},
                {"seed", seed},
                {"early_stop_patience", early_stop_patience},
                {"early_stop_min_improve", early_stop_min_improve},
                {"update_order", "disc_then_denoiser"}};
    }
};

// Weighted total from Eq.-style combination: lambda1 * L_caf + lambda2 * L_adv.
inline double loss_total(const CafdTrainConfig& cfg, double l_caf, double l_adv) {
    return cfg.lambda1 * l_caf + cfg.lambda2 * l_adv;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <typename T>
struct DenoiserCheckpoint {
    DenoiserNet<T> net;
    std::optional<Discriminator<T>> disc;
    json meta;

    Tensor<T> denoise(const Tensor<T>& x) { return net.denoise(x); }
};

template <typename T>
void save_denoiser(DenoiserNet<T>& net, Discriminator<T>* disc, const json& extra_meta,
                   const std::filesystem::path& path) {
    TensorArchive a;
    a.meta = extra_meta;
    a.meta["kind"] = "denoiser";
    a.meta["arch"] = net.arch.to_json();
    a.meta["has_discriminator"] = (disc != nullptr);
    if (!a.meta.contains("backbone_checksum"))
        throw std::invalid_argument("save_denoiser: provenance requires a backbone_checksum field");
    auto reg = net.state();
    for (auto& [name, v] : reg.params) a.tensors.emplace_back(name, v.val().template cast<float>());
    for (auto& [name, t] : reg.buffers) a.tensors.emplace_back(name, t->template cast<float>());
    if (disc) {
        a.meta["disc_arch"] = disc->arch.to_json();
        auto dreg = disc->state();
        for (auto& [name, v] : dreg.params) a.tensors.emplace_back("disc." + name, v.val().template cast<float>());
        for (auto& [name, t] : dreg.buffers) a.tensors.emplace_back("disc." + name, t->template cast<float>());
    }
    save_archive(a, path);
}

template <typename T>
DenoiserCheckpoint<T> load_denoiser(const std::filesystem::path& path) {
    TensorArchive a = load_archive(path);
    if (a.meta.value("kind", "") != "denoiser")
        throw std::runtime_error("load_denoiser: " + path.string() + " is not a denoiser checkpoint");
    DenoiserCheckpoint<T> ckpt;
    ckpt.meta = a.meta;
    ckpt.net = DenoiserNet<T>(DenoiserArch::from_json(a.meta.at("arch")), 0);
    auto reg = ckpt.net.state();
    for (auto& [name, v] : reg.params) {
        const auto& t = a.find(name);
        if (t.shape != v.val().shape)
            throw std::runtime_error("load_denoiser: tensor '" + name + "' shape mismatch");
        v.mutable_val() = t.template cast<T>();
    }
    for (auto& [name, t] : reg.buffers) *t = a.find(name).template cast<T>();
    if (a.meta.value("has_discriminator", false)) {
        ckpt.disc = Discriminator<T>(DenoiserArch::from_json(a.meta.at("disc_arch")), 0);
        auto dreg = ckpt.disc->state();
        for (auto& [name, v] : dreg.params) v.mutable_val() = a.find("disc." + name).template cast<T>();
        for (auto& [name, t] : dreg.buffers) *t = a.find("disc." + name).template cast<T>();
    }
    return ckpt;
}

} // namespace caf
