#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "caf/attacks.hpp"
#include "caf/dataset.hpp"
#include "caf/denoiser.hpp"

namespace caf {

struct CafdCurveRow {
    int epoch = 0;
    int batch = 0;
    double l_caf = 0.0;
    double l_adv = 0.0;
    double l_disc = 0.0;
    double val_delta = 0.0; // most recently measured validation mean distance
};

template <typename T>
struct CafdTrainResult {
    DenoiserNet<T> net;
    std::optional<Discriminator<T>> disc;
    std::vector<CafdCurveRow> curves;
    json summary;
};

// Self-supervised min-max training: each batch crafts fresh adversarial
// examples against the frozen backbone, then takes one discriminator step
// and one denoiser step. Stops on a fixed epoch budget or when the
// validation mean feature distance stops improving.
template <typename T>
CafdTrainResult<T> train_cafd(const Dataset& train, const Dataset& val, CamClassifier<T>& backbone,
                              const CafdTrainConfig& cfg, std::uint32_t backbone_checksum = 0) {
    cfg.validate();
    if (cfg.expected_backbone_checksum != 0 && backbone_checksum != 0 &&
        cfg.expected_backbone_checksum != backbone_checksum)
        throw std::invalid_argument("train_cafd: pretrained network checksum " + std::to_string(backbone_checksum) +
                                    " does not match configured " + std::to_string(cfg.expected_backbone_checksum));

    AttackConfig inner;
    inner.kind = AttackKind::kCafa;
    inner.epsilon = cfg.inner_epsilon;
    inner.step_size = cfg.inner_step_size;
    inner.iterations = cfg.inner_iterations;

    DenoiserArch arch;
    arch.image_size = static_cast<int>(train.height());
    arch.channels = static_cast<int>(train.channels());
    arch.widths = cfg.widths;

    CafdTrainResult<T> result;
    result.net = DenoiserNet<T>(arch, cfg.seed);
    const bool use_adv = !cfg.drop_adv && cfg.lambda2 > 0.0;
    if (use_adv) result.disc = Discriminator<T>(arch, cfg.seed + 1);

    auto net_reg = result.net.state();
    net_reg.set_requires_grad(true);
    Adam<T> opt_c(net_reg.param_values());
    std::optional<Adam<T>> opt_d;
    if (use_adv) {
        auto disc_reg = result.disc->state();
        disc_reg.set_requires_grad(true);
        opt_d.emplace(disc_reg.param_values());
    }

    // The backbone stays fixed for the whole run.
    FrozenGuard<T> backbone_guard(backbone.state());

    // Held-out adversarial set for the plateau criterion, crafted once.
    const Tensor<T> x_val = to_float(val.images).template cast<T>();
    const Tensor<T> x_val_adv = cafa(backbone, x_val, inner).adversarial;
    auto [val_logits, val_feats] = backbone.forward_eval(x_val);
    const auto val_classes = argmax_rows(val_logits);
    const Tensor<T> val_rows = gather_weight_rows(backbone.class_weights(), val_classes);
    const Tensor<T> val_phi = caf_from_features(val_feats, val_rows);
    auto val_delta = [&]() {
        const Tensor<T> restored = result.net.denoise(x_val_adv);
        const Tensor<T> feats = backbone.forward_eval(restored).second;
        CafBatch<T> a{val_phi, val_classes, "natural"};
        CafBatch<T> b{caf_from_features(feats, val_rows), val_classes, "restored"};
        return static_cast<double>(feature_distance(a, b).mean());
    };

    double current_val = val_delta();
    const double initial_val = current_val;
    double best_val = current_val;
    int stall = 0;
    int epochs_run = 0;
    bool early_stopped = false;

    const std::int64_t chw = train.channels() * train.height() * train.width();
    Tensor<float> all = to_float(train.images);
    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    Rng rng(cfg.seed);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng erng = rng.fork(static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        const double lr = decayed_lr(cfg.lr, cfg.lr_final, epoch, cfg.epochs);
        int batch_idx = 0;
        for (std::int64_t start = 0; start < train.size(); start += cfg.batch_size, ++batch_idx) {
            const std::int64_t n = std::min<std::int64_t>(cfg.batch_size, train.size() - start);
            Tensor<T> xb({n, train.channels(), train.height(), train.width()});
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t src = order[static_cast<std::size_t>(start + i)];
                for (std::int64_t j = 0; j < chw; ++j) xb[i * chw + j] = static_cast<T>(all[src * chw + j]);
            }

            const Tensor<T> x_adv = cafa(backbone, xb, inner).adversarial;
            Value<T> restored = result.net.forward_graph(Value<T>::constant(x_adv), true);

            // Restoration term; when ablated it is still monitored (detached).
            Value<T> l_caf_value;
            {
                const Value<T> target = cfg.drop_caf ? restored.detach() : restored;
                switch (cfg.variant) {
                    case CafLossVariant::kPhi: l_caf_value = loss_caf_phi(backbone, xb, target); break;
                    case CafLossVariant::kFeatWeight: l_caf_value = loss_caf_featweight(backbone, xb, target); break;
                    case CafLossVariant::kMse: l_caf_value = mse_loss(xb, target); break;
                }
            }

            double l_disc_scalar = 0.0;
            Value<T> l_adv_value;
            std::optional<FrozenGuard<T>> disc_guard;
            if (use_adv) {
                Value<T> l_d = loss_disc(*result.disc, Value<T>::constant(xb), restored.detach(), true);
                l_disc_scalar = static_cast<double>(l_d.scalar());
                if (!std::isfinite(l_disc_scalar))
                    throw TrainingDivergedError("train_cafd: non-finite discriminator loss");
                opt_d->zero_grad();
                backward(l_d);
                opt_d->step(lr);

                disc_guard.emplace(result.disc->state());
                l_adv_value = loss_adv(*result.disc, Value<T>::constant(xb), restored, true);
            }

            Value<T> total;
            if (cfg.drop_caf)
                total = mul_scalar(l_adv_value, static_cast<T>(cfg.lambda2));
            else if (use_adv)
                total = add(mul_scalar(l_caf_value, static_cast<T>(cfg.lambda1)),
                            mul_scalar(l_adv_value, static_cast<T>(cfg.lambda2)));
            else
                total = mul_scalar(l_caf_value, static_cast<T>(cfg.lambda1));

            const double total_scalar = static_cast<double>(total.scalar());
            if (!std::isfinite(total_scalar))
                throw TrainingDivergedError("train_cafd: non-finite loss at epoch " + std::to_string(epoch) +
                                            ", batch " + std::to_string(batch_idx));
            opt_c.zero_grad();
            backward(total);
            opt_c.step(lr);
            disc_guard.reset();

            result.curves.push_back({epoch, batch_idx, static_cast<double>(l_caf_value.scalar()),
                                     use_adv ? static_cast<double>(l_adv_value.scalar()) : 0.0, l_disc_scalar,
                                     current_val});
        }

        current_val = val_delta();
        epochs_run = epoch + 1;
        result.curves.push_back({epoch, -1, 0.0, 0.0, 0.0, current_val});
        if (current_val < best_val * (1.0 - cfg.early_stop_min_improve)) {
            best_val = current_val;
            stall = 0;
        } else {
            best_val = std::min(best_val, current_val);
            if (++stall >= cfg.early_stop_patience) {
                early_stopped = true;
                break;
            }
        }
    }

    result.summary = {{"initial_val_delta", initial_val},
                      {"final_val_delta", current_val},
                      {"epochs_run", epochs_run},
                      {"early_stopped", early_stopped},
                      {"train_config", cfg.to_json()}};
    return result;
}

inline void write_curves_csv(const std::vector<CafdCurveRow>& rows, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    os << "epoch,batch,l_caf,l_adv,l_disc,val_delta\n";
    os.precision(9);
    for (const auto& r : rows)
        os << r.epoch << ',' << r.batch << ',' << r.l_caf << ',' << r.l_adv << ',' << r.l_disc << ','
           << r.val_delta << '\n';
}

} // namespace caf
