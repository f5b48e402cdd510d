#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "caf/classifier.hpp"

namespace caf {

struct NumericalFaultError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// How to pick the class whose weight row scales the features. During attack
// and denoiser losses the natural example's predicted class is used for both
// sides of a distance, so the objective stays stable while the adversarial
// iterate's own argmax flips.
struct ClassSelect {
    enum Mode { kSelfArgmax, kFixed } mode = kSelfArgmax;
    int fixed_class = 0;

    static ClassSelect self_argmax() { return {kSelfArgmax, 0}; }
    static ClassSelect fixed(int c) { return {kFixed, c}; }
};

// Class activation features for a batch: phi[n,k,:,:] = f^k(x_n) * W[c_n,k].
template <typename T>
struct CafBatch {
    Tensor<T> phi;                // (N, K, H', W')
    std::vector<int> class_index; // class used to select the weight row
    std::string source;           // "natural" | "adversarial" | "restored"
};

// Weight rows for a list of classes: (num_classes, K) -> (N, K).
template <typename T>
Tensor<T> gather_weight_rows(const Tensor<T>& weights, const std::vector<int>& classes) {
    const std::int64_t k = weights.shape.at(1);
    Tensor<T> rows({static_cast<std::int64_t>(classes.size()), k});
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i] < 0 || classes[i] >= weights.shape[0])
            throw std::invalid_argument("class index " + std::to_string(classes[i]) + " out of range");
        std::copy_n(weights.ptr() + classes[i] * k, k, rows.ptr() + static_cast<std::int64_t>(i) * k);
    }
    return rows;
}

// phi = features scaled per channel by each example's weight row.
template <typename T>
Tensor<T> caf_from_features(const Tensor<T>& features, const Tensor<T>& weight_rows) {
    const std::int64_t n = features.shape.at(0), k = features.shape.at(1);
    const std::int64_t hw = features.shape.at(2) * features.shape.at(3);
    Tensor<T> phi(features.shape);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) {
            const T w = weight_rows.at(i, j);
            const T* src = features.ptr() + (i * k + j) * hw;
            T* dst = phi.ptr() + (i * k + j) * hw;
            for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p] * w;
        }
    return phi;
}

template <typename T>
std::vector<int> select_classes(const Tensor<T>& logits, const ClassSelect& sel, std::int64_t num_classes) {
    if (sel.mode == ClassSelect::kFixed) {
        if (sel.fixed_class < 0 || sel.fixed_class >= num_classes)
            throw std::invalid_argument("fixed class " + std::to_string(sel.fixed_class) + " out of range");
        return std::vector<int>(static_cast<std::size_t>(logits.shape.at(0)), sel.fixed_class);
    }
    return argmax_rows(logits);
}

template <typename T>
CafBatch<T> class_activation_features(CamClassifier<T>& m, const Tensor<T>& x,
                                      ClassSelect sel = ClassSelect::self_argmax(),
                                      std::string source = "natural") {
    auto [logits, features] = m.forward_eval(x);
    CafBatch<T> out;
    out.class_index = select_classes(logits, sel, m.arch.num_classes);
    out.phi = caf_from_features(features, gather_weight_rows(m.class_weights(), out.class_index));
    out.source = std::move(source);
    return out;
}

// Class activation map: channelwise sum of phi, (N, H', W').
template <typename T>
Tensor<T> cam_map(const CafBatch<T>& caf) {
    const auto& s = caf.phi.shape;
    const std::int64_t n = s[0], k = s[1], hw = s[2] * s[3];
    Tensor<T> map({n, s[2], s[3]});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) {
            const T* src = caf.phi.ptr() + (i * k + j) * hw;
            T* dst = map.ptr() + i * hw;
            for (std::int64_t p = 0; p < hw; ++p) dst[p] += src[p];
        }
    return map;
}

// Per-example min-max normalization to [0,1]; a constant map (degenerate
// range) normalizes to all zeros.
template <typename T>
Tensor<T> minmax_normalize(const Tensor<T>& map) {
    const std::int64_t n = map.shape.at(0);
    const std::int64_t stride = map.numel() / n;
    Tensor<T> out(map.shape);
    for (std::int64_t i = 0; i < n; ++i) {
        const T* src = map.ptr() + i * stride;
        T lo = src[0], hi = src[0];
        for (std::int64_t j = 1; j < stride; ++j) {
            lo = std::min(lo, src[j]);
            hi = std::max(hi, src[j]);
        }
        T* dst = out.ptr() + i * stride;
        if (static_cast<double>(hi - lo) < 1e-12) {
            for (std::int64_t j = 0; j < stride; ++j) dst[j] = T(0);
        } else {
            for (std::int64_t j = 0; j < stride; ++j) dst[j] = (src[j] - lo) / (hi - lo);
        }
    }
    return out;
}

// Bilinear upsample of (N, H, W) maps to out_size x out_size.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& map, std::int64_t out_size) {
    const std::int64_t n = map.shape.at(0), h = map.shape.at(1), w = map.shape.at(2);
    Tensor<T> out({n, out_size, out_size});
    const double sy = static_cast<double>(h) / static_cast<double>(out_size);
    const double sx = static_cast<double>(w) / static_cast<double>(out_size);
    for (std::int64_t i = 0; i < n; ++i) {
        const T* src = map.ptr() + i * h * w;
        T* dst = out.ptr() + i * out_size * out_size;
        for (std::int64_t y = 0; y < out_size; ++y) {
            const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
            const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), h - 1);
            const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (std::int64_t x = 0; x < out_size; ++x) {
                const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
                const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), w - 1);
                const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
                const double wx = fx - static_cast<double>(x0);
                const double v = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                                 wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                dst[y * out_size + x] = static_cast<T>(v);
            }
        }
    }
    return out;
}

// L2 feature distance per example: Delta_n = sqrt(sum_kij (a-b)^2).
template <typename T>
Tensor<T> feature_distance(const CafBatch<T>& a, const CafBatch<T>& b) {
    if (a.phi.shape != b.phi.shape)
        throw std::invalid_argument("feature_distance: shape mismatch " + shape_str(a.phi.shape) + " vs " +
                                    shape_str(b.phi.shape));
    const std::int64_t n = a.phi.shape[0];
    const std::int64_t stride = a.phi.numel() / n;
    Tensor<T> out({n});
    for (std::int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        const T* pa = a.phi.ptr() + i * stride;
        const T* pb = b.phi.ptr() + i * stride;
        for (std::int64_t j = 0; j < stride; ++j) {
            const double d = static_cast<double>(pa[j]) - static_cast<double>(pb[j]);
            s += d * d;
        }
        out[i] = static_cast<T>(std::sqrt(s));
    }
    return out;
}

// Graph-side per-example distance between a constant reference phi and the
// features of a variable input. The sqrt gradient is defined as zero when
// the distance is below 1e-12 (squared sum below 1e-24), so the start of an
// attack (identical inputs) does not produce NaNs.
template <typename T>
Value<T> feature_distance_graph(const Tensor<T>& phi_ref, const Value<T>& features_var,
                                const Tensor<T>& weight_rows) {
    Value<T> phi_var = scale_channels(features_var, weight_rows);
    Value<T> diff = sub(phi_var, Value<T>::constant(phi_ref));
    return sqrt_guarded(sum_per_example(square(diff)), T(1e-24));
}

template <typename T>
struct DistanceGrad {
    Tensor<T> grad;      // d(sum_n Delta_n)/d(x_var), i.e. per-example gradients
    Tensor<T> distances; // (N)
};

// Gradient of the feature distance w.r.t. the variable batch, with phi of
// the reference batch held constant. Classes come from the reference batch.
template <typename T>
DistanceGrad<T> feature_distance_grad(CamClassifier<T>& m, const Tensor<T>& x_ref, const Tensor<T>& x_var,
                                      ClassSelect sel = ClassSelect::self_argmax()) {
    auto [logits_ref, features_ref] = m.forward_eval(x_ref);
    const auto classes = select_classes(logits_ref, sel, m.arch.num_classes);
    const Tensor<T> rows = gather_weight_rows(m.class_weights(), classes);
    const Tensor<T> phi_ref = caf_from_features(features_ref, rows);

    FrozenGuard<T> guard(m.state());
    Value<T> xv = Value<T>::leaf(x_var);
    auto out = m.forward_graph(xv, false);
    Value<T> dist = feature_distance_graph(phi_ref, out.features, rows);
    backward(sum(dist));

    DistanceGrad<T> r{xv.grad(), dist.val()};
    if (!r.grad.all_finite())
        throw NumericalFaultError("feature_distance_grad: non-finite gradient");
    return r;
}

// GAP identity: spatial mean of the class activation map must equal
// logit_c - bias_c. Returns the largest residual over the batch.
template <typename T>
double cam_identity_residual(const Tensor<T>& logits, const Tensor<T>& bias, const CafBatch<T>& caf) {
    const Tensor<T> map = cam_map(caf);
    const std::int64_t n = map.shape[0], hw = map.shape[1] * map.shape[2];
    double worst = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double mean = 0.0;
        const T* p = map.ptr() + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) mean += static_cast<double>(p[j]);
        mean /= static_cast<double>(hw);
        const int c = caf.class_index[static_cast<std::size_t>(i)];
        const double expect = static_cast<double>(logits.at(i, c)) - static_cast<double>(bias[c]);
        worst = std::max(worst, std::abs(mean - expect));
    }
    return worst;
}

} // namespace caf
