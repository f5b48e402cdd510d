#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "caf/cam.hpp"
#include "caf/denoiser_net.hpp"

namespace caf {

enum class AttackKind { kCafa, kPgdCe, kFgsm, kRandomSign, kBpda, kWhiteboxAdaptive };

inline std::string attack_kind_name(AttackKind k) {
    switch (k) {
        case AttackKind::kCafa: return "cafa";
        case AttackKind::kPgdCe: return "pgd_ce";
        case AttackKind::kFgsm: return "fgsm";
        case AttackKind::kRandomSign: return "random_sign";
        case AttackKind::kBpda: return "bpda";
        case AttackKind::kWhiteboxAdaptive: return "whitebox_adaptive";
    }
    return "?";
}

inline AttackKind attack_kind_from_name(const std::string& s) {
    if (s == "cafa") return AttackKind::kCafa;
    if (s == "pgd_ce") return AttackKind::kPgdCe;
    if (s == "fgsm") return AttackKind::kFgsm;
    if (s == "random_sign") return AttackKind::kRandomSign;
    if (s == "bpda") return AttackKind::kBpda;
    if (s == "whitebox_adaptive") return AttackKind::kWhiteboxAdaptive;
    throw std::invalid_argument("unknown attack kind '" + s + "'");
}

struct AttackConfig {
    AttackKind kind = AttackKind::kCafa;
    double epsilon = 8.0 / 255.0;   // L-inf budget as a fraction of dynamic range
    double step_size = 2.0 / 255.0; // alpha
    int iterations = 10;            // T
    bool targeted = false;          // pgd_ce only
    int target_class = 0;
    bool random_start = false; // pgd_ce only; off by default
    std::uint64_t seed = 0;    // random start / random_sign

    void validate() const {
        if (epsilon < 0.0) throw std::invalid_argument("attack: epsilon must be >= 0");
        if (iterations < 1) throw std::invalid_argument("attack: iterations must be >= 1");
        const bool iterative = kind != AttackKind::kRandomSign;
        if (iterative && step_size <= 0.0) throw std::invalid_argument("attack: step_size must be > 0");
        if (targeted && kind != AttackKind::kPgdCe && kind != AttackKind::kBpda &&
            kind != AttackKind::kWhiteboxAdaptive)
            throw std::invalid_argument("attack: targeted mode is only defined for cross-entropy attacks");
    }

    json to_json() const {
        return {{"kind", attack_kind_name(kind)},
                {"epsilon", epsilon},
                {"step_size", step_size},
                {"iterations", iterations},
                {"targeted", targeted},
                {"target_class", target_class},
                {"random_start", random_start},
                {"seed", seed}};
    }
};

// fooled[i] is measured against the raw network m: prediction changed
// (non-targeted) or reached the target (targeted). Defended metrics are the
// eval module's business.
template <typename T>
struct AttackResult {
    Tensor<T> adversarial;        // x~ in [0,1], max |x~-x| <= eps
    Tensor<T> distances;          // per-example Delta(x, x~) w.r.t. m
    std::vector<std::uint8_t> fooled;
    double max_linf = 0.0;        // constraint audit
    double mean_delta = 0.0;

    double fooling_rate() const {
        if (fooled.empty()) return 0.0;
        double s = 0.0;
        for (auto f : fooled) s += f;
        return s / static_cast<double>(fooled.size());
    }
};

namespace detail {

// Eq.-style update: step along the sign, project into the eps-ball around
// the natural batch, then clamp to the valid image range.
template <typename T>
void project_step(Tensor<T>& adv, const Tensor<T>& grad, T alpha, const Tensor<T>& natural, T eps) {
    for (std::int64_t i = 0; i < adv.numel(); ++i) {
        const T g = grad[i];
        const T step = g > T(0) ? alpha : (g < T(0) ? -alpha : T(0));
        adv[i] += step;
    }
    clip_to_ball_(adv, natural, eps);
    clamp_(adv, T(0), T(1));
}

template <typename T>
AttackResult<T> finalize(CamClassifier<T>& m, const Tensor<T>& natural, Tensor<T> adv, bool targeted,
                         int target_class) {
    AttackResult<T> r;
    auto caf_nat = class_activation_features(m, natural, ClassSelect::self_argmax(), "natural");
    const Tensor<T> rows = gather_weight_rows(m.class_weights(), caf_nat.class_index);
    auto [logits_adv, feats_adv] = m.forward_eval(adv);
    CafBatch<T> caf_adv{caf_from_features(feats_adv, rows), caf_nat.class_index, "adversarial"};
    r.distances = feature_distance(caf_nat, caf_adv);
    r.mean_delta = r.distances.mean();

    const auto pred_nat = argmax_rows(m.logits_eval(natural));
    const auto pred_adv = argmax_rows(logits_adv);
    r.fooled.resize(pred_adv.size());
    for (std::size_t i = 0; i < pred_adv.size(); ++i)
        r.fooled[i] = targeted ? (pred_adv[i] == target_class) : (pred_adv[i] != pred_nat[i]);
    r.max_linf = linf_distance(adv, natural);
    r.adversarial = std::move(adv);
    return r;
}

} // namespace detail

// Class activation feature based attack: T iterations of projected sign
// ascent on the feature distance, starting from the natural batch.
//
// The iterate starts at the exact minimum of the objective (x~0 = x gives
// a distance of 0 with a guarded zero gradient), where a signed step of
// zero would freeze the attack forever. Every direction away from that apex
// increases the distance to first order, so examples sitting on it take one
// step along the label-free direction that reduces their own predicted
// class's logit; from then on the true distance gradient drives the ascent.
template <typename T>
AttackResult<T> cafa(CamClassifier<T>& m, const Tensor<T>& x, const AttackConfig& cfg) {
    cfg.validate();
    m.check_input(x);
    Tensor<T> adv = x;
    if (cfg.epsilon > 0.0) {
        // Reference features are those of the natural batch, computed once;
        // inference mode makes every iteration see the same reference.
        auto [logits_ref, features_ref] = m.forward_eval(x);
        const auto classes = argmax_rows(logits_ref);
        const Tensor<T> rows = gather_weight_rows(m.class_weights(), classes);
        const Tensor<T> phi_ref = caf_from_features(features_ref, rows);

        const std::int64_t n = x.shape[0];
        const std::int64_t chw = x.numel() / n;

        // Apex escape direction: d(-logit_{c_x})/dx at the natural batch.
        Tensor<T> apex_dir;
        {
            FrozenGuard<T> guard(m.state());
            Value<T> xv = Value<T>::leaf(x);
            auto out = m.forward_graph(xv, false);
            Tensor<T> pick({n, static_cast<std::int64_t>(m.arch.num_classes)});
            for (std::int64_t i = 0; i < n; ++i) pick.at(i, classes[static_cast<std::size_t>(i)]) = T(-1);
            backward(sum(mul(out.logits, Value<T>::constant(pick))));
            apex_dir = xv.grad();
        }

        FrozenGuard<T> guard(m.state());
        for (int t = 0; t < cfg.iterations; ++t) {
            Value<T> xv = Value<T>::leaf(adv);
            auto out = m.forward_graph(xv, false);
            Value<T> dist = feature_distance_graph(phi_ref, out.features, rows);
            backward(sum(dist));
            Tensor<T> g = xv.grad();
            if (!g.all_finite())
                throw NumericalFaultError("cafa: non-finite gradient at iteration " + std::to_string(t));
            for (std::int64_t i = 0; i < n; ++i)
                if (static_cast<double>(dist.val()[i]) < 1e-12)
                    std::copy_n(apex_dir.ptr() + i * chw, chw, g.ptr() + i * chw);
            detail::project_step(adv, g, static_cast<T>(cfg.step_size), x, static_cast<T>(cfg.epsilon));
        }
    }
    return detail::finalize(m, x, std::move(adv), false, 0);
}

// Cross-entropy PGD. Without labels the natural predictions stand in.
// Non-targeted ascends the loss; targeted descends towards target_class.
template <typename T>
AttackResult<T> pgd_ce(CamClassifier<T>& m, const Tensor<T>& x, const std::vector<int>* labels,
                       const AttackConfig& cfg) {
    cfg.validate();
    m.check_input(x);
    std::vector<int> base = labels ? *labels : m.predict(x);
    if (cfg.targeted) base.assign(base.size(), cfg.target_class);
    const T direction = cfg.targeted ? T(-1) : T(1);

    Tensor<T> adv = x;
    if (cfg.epsilon > 0.0) {
        if (cfg.random_start) {
            Rng rng(cfg.seed);
            for (auto& v : adv.data)
                v += static_cast<T>(rng.uniform(-cfg.epsilon, cfg.epsilon));
            clamp_(adv, T(0), T(1));
        }
        FrozenGuard<T> guard(m.state());
        for (int t = 0; t < cfg.iterations; ++t) {
            Value<T> xv = Value<T>::leaf(adv);
            auto out = m.forward_graph(xv, false);
            Value<T> loss = softmax_cross_entropy(out.logits, base);
            backward(loss);
            Tensor<T> g = xv.grad();
            if (!g.all_finite())
                throw NumericalFaultError("pgd_ce: non-finite gradient at iteration " + std::to_string(t));
            g *= direction;
            detail::project_step(adv, g, static_cast<T>(cfg.step_size), x, static_cast<T>(cfg.epsilon));
        }
    }
    return detail::finalize(m, x, std::move(adv), cfg.targeted, cfg.target_class);
}

// Single-step sign attack: PGD with T=1 and alpha=eps.
template <typename T>
AttackResult<T> fgsm(CamClassifier<T>& m, const Tensor<T>& x, const AttackConfig& cfg) {
    AttackConfig one = cfg;
    one.kind = AttackKind::kPgdCe;
    one.iterations = 1;
    one.step_size = std::max(cfg.epsilon, 1e-12);
    one.random_start = false;
    return pgd_ce(m, x, nullptr, one);
}

// Control baseline: x + eps * random sign tensor, clamped to [0,1].
template <typename T>
AttackResult<T> random_sign(CamClassifier<T>& m, const Tensor<T>& x, const AttackConfig& cfg) {
    m.check_input(x);
    Rng rng(cfg.seed);
    Tensor<T> adv = x;
    for (auto& v : adv.data) v += static_cast<T>(cfg.epsilon) * static_cast<T>(rng.sign());
    clamp_(adv, T(0), T(1));
    return detail::finalize(m, x, std::move(adv), false, 0);
}

// BPDA through the denoiser: forward passes go x~ -> C -> m, the backward
// pass treats C as the identity, so the cross-entropy gradient taken at
// u = C(x~) is applied directly to x~.
template <typename T>
AttackResult<T> bpda_attack(CamClassifier<T>& m, DenoiserNet<T>& denoiser, const Tensor<T>& x,
                            const std::vector<int>* labels, const AttackConfig& cfg) {
    cfg.validate();
    m.check_input(x);
    std::vector<int> base = labels ? *labels : m.predict(denoiser.denoise(x));
    if (cfg.targeted) base.assign(base.size(), cfg.target_class);
    const T direction = cfg.targeted ? T(-1) : T(1);

    Tensor<T> adv = x;
    if (cfg.epsilon > 0.0) {
        FrozenGuard<T> guard(m.state());
        for (int t = 0; t < cfg.iterations; ++t) {
            Tensor<T> u = denoiser.denoise(adv);
            Value<T> uv = Value<T>::leaf(u);
            auto out = m.forward_graph(uv, false);
            Value<T> loss = softmax_cross_entropy(out.logits, base);
            backward(loss);
            Tensor<T> g = uv.grad();
            if (!g.all_finite())
                throw NumericalFaultError("bpda_attack: non-finite gradient at iteration " + std::to_string(t));
            g *= direction;
            detail::project_step(adv, g, static_cast<T>(cfg.step_size), x, static_cast<T>(cfg.epsilon));
        }
    }
    return detail::finalize(m, x, std::move(adv), cfg.targeted, cfg.target_class);
}

// White-box adaptive attack: PGD on the composite m(C(x~)) with full
// gradient flow through the denoiser.
template <typename T>
AttackResult<T> whitebox_adaptive(CamClassifier<T>& m, DenoiserNet<T>& denoiser, const Tensor<T>& x,
                                  const std::vector<int>* labels, const AttackConfig& cfg) {
    cfg.validate();
    m.check_input(x);
    std::vector<int> base = labels ? *labels : m.predict(denoiser.denoise(x));
    if (cfg.targeted) base.assign(base.size(), cfg.target_class);
    const T direction = cfg.targeted ? T(-1) : T(1);

    Tensor<T> adv = x;
    if (cfg.epsilon > 0.0) {
        FrozenGuard<T> guard_m(m.state());
        FrozenGuard<T> guard_d(denoiser.state());
        for (int t = 0; t < cfg.iterations; ++t) {
            Value<T> xv = Value<T>::leaf(adv);
            Value<T> restored = denoiser.forward_graph(xv, false);
            auto out = m.forward_graph(restored, false);
            Value<T> loss = softmax_cross_entropy(out.logits, base);
            backward(loss);
            Tensor<T> g = xv.grad();
            if (!g.all_finite())
                throw NumericalFaultError("whitebox_adaptive: non-finite gradient at iteration " + std::to_string(t));
            g *= direction;
            detail::project_step(adv, g, static_cast<T>(cfg.step_size), x, static_cast<T>(cfg.epsilon));
        }
    }
    return detail::finalize(m, x, std::move(adv), cfg.targeted, cfg.target_class);
}

// Dispatch by configured kind; denoiser is required for the adaptive kinds
// and ignored otherwise.
template <typename T>
AttackResult<T> run_attack(CamClassifier<T>& m, DenoiserNet<T>* denoiser, const Tensor<T>& x,
                           const std::vector<int>* labels, const AttackConfig& cfg) {
    switch (cfg.kind) {
        case AttackKind::kCafa: return cafa(m, x, cfg);
        case AttackKind::kPgdCe: return pgd_ce(m, x, labels, cfg);
        case AttackKind::kFgsm: return fgsm(m, x, cfg);
        case AttackKind::kRandomSign: return random_sign(m, x, cfg);
        case AttackKind::kBpda:
            if (!denoiser) throw std::invalid_argument("bpda attack requires a denoiser");
            return bpda_attack(m, *denoiser, x, labels, cfg);
        case AttackKind::kWhiteboxAdaptive:
            if (!denoiser) throw std::invalid_argument("whitebox_adaptive attack requires a denoiser");
            return whitebox_adaptive(m, *denoiser, x, labels, cfg);
    }
    throw std::logic_error("unreachable attack kind");
}

} // namespace caf
