#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "caf/nn_ops.hpp"

namespace caf {

// Named views over a model's parameters and persistent buffers (running
// statistics). Models expose their state through this registry; the
// checkpoint codec and the optimizer work against it.
template <typename T>
struct StateRegistry {
    std::vector<std::pair<std::string, Value<T>>> params;
    std::vector<std::pair<std::string, Tensor<T>*>> buffers;

    void add_param(const std::string& name, const Value<T>& v) { params.emplace_back(name, v); }
    void add_buffer(const std::string& name, Tensor<T>* t) { buffers.emplace_back(name, t); }

    void merge(const std::string& prefix, StateRegistry other) {
        for (auto& [n, v] : other.params) params.emplace_back(prefix + n, v);
        for (auto& [n, t] : other.buffers) buffers.emplace_back(prefix + n, t);
    }

    std::vector<Value<T>> param_values() const {
        std::vector<Value<T>> out;
        out.reserve(params.size());
        for (auto& [n, v] : params) out.push_back(v);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& [n, v] : params) v.node()->requires_grad = on;
    }

    std::int64_t param_count() const {
        std::int64_t c = 0;
        for (auto& [n, v] : params) c += v.val().numel();
        return c;
    }
};

template <typename T>
struct Conv2dLayer {
    Value<T> weight, bias;
    std::int64_t stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(std::int64_t cin, std::int64_t cout, std::int64_t k, Rng& rng, std::int64_t stride_ = 1,
                std::int64_t pad_ = 1, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        const T std_dev = zero_init ? T(0) : static_cast<T>(std::sqrt(2.0 / static_cast<double>(cin * k * k)));
        weight = Value<T>::leaf(Tensor<T>::randn({cout, cin, k, k}, rng, std_dev));
        bias = Value<T>::leaf(Tensor<T>::zeros({cout}));
    }

    Value<T> operator()(const Value<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        r.add_param("weight", weight);
        r.add_param("bias", bias);
        return r;
    }
};

template <typename T>
struct BatchNorm2dLayer {
    Value<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    BatchNorm2dLayer() = default;
    explicit BatchNorm2dLayer(std::int64_t c)
        : gamma(Value<T>::leaf(Tensor<T>::full({c}, T(1)))),
          beta(Value<T>::leaf(Tensor<T>::zeros({c}))),
          running_mean(Tensor<T>::zeros({c})),
          running_var(Tensor<T>::full({c}, T(1))) {}

    Value<T> operator()(const Value<T>& x, bool training) {
        return batchnorm2d(x, gamma, beta, &running_mean, &running_var, training);
    }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        r.add_param("gamma", gamma);
        r.add_param("beta", beta);
        r.add_buffer("running_mean", &running_mean);
        r.add_buffer("running_var", &running_var);
        return r;
    }
};

template <typename T>
struct LinearLayer {
    Value<T> weight, bias;

    LinearLayer() = default;
    LinearLayer(std::int64_t din, std::int64_t dout, Rng& rng) {
        const T std_dev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(din)));
        weight = Value<T>::leaf(Tensor<T>::randn({dout, din}, rng, std_dev));
        bias = Value<T>::leaf(Tensor<T>::zeros({dout}));
    }

    Value<T> operator()(const Value<T>& x) const { return linear(x, weight, bias); }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        r.add_param("weight", weight);
        r.add_param("bias", bias);
        return r;
    }
};

// conv 3x3 -> batch norm -> rectifier.
template <typename T>
struct ConvBnRelu {
    Conv2dLayer<T> conv;
    BatchNorm2dLayer<T> bn;
    T leak = T(0); // 0 = plain ReLU

    ConvBnRelu() = default;
    ConvBnRelu(std::int64_t cin, std::int64_t cout, Rng& rng, T leak_ = T(0))
        : conv(cin, cout, 3, rng), bn(cout), leak(leak_) {}

    Value<T> operator()(const Value<T>& x, bool training) {
        Value<T> y = bn(conv(x), training);
        return leak > T(0) ? leaky_relu(y, leak) : relu(y);
    }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        r.merge("conv.", conv.state());
        r.merge("bn.", bn.state());
        return r;
    }
};

// Adam with bias correction. Owns first/second moment state per parameter.
template <typename T>
class Adam {
public:
    explicit Adam(std::vector<Value<T>> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.push_back(Tensor<T>::zeros(p.val().shape));
            v_.push_back(Tensor<T>::zeros(p.val().shape));
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const Tensor<T>& g = params_[i].grad();
            Tensor<T>& val = params_[i].mutable_val();
            for (std::int64_t j = 0; j < val.numel(); ++j) {
                const double gj = static_cast<double>(g[j]);
                double mj = beta1_ * static_cast<double>(m_[i][j]) + (1.0 - beta1_) * gj;
                double vj = beta2_ * static_cast<double>(v_[i][j]) + (1.0 - beta2_) * gj * gj;
                m_[i][j] = static_cast<T>(mj);
                v_[i][j] = static_cast<T>(vj);
                val[j] -= static_cast<T>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
            }
        }
    }

private:
    std::vector<Value<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
};

// Geometric interpolation from lr0 at epoch 0 to lr1 at the last epoch.
inline double decayed_lr(double lr0, double lr1, int epoch, int total_epochs) {
    if (total_epochs <= 1 || lr0 <= 0.0) return lr0;
    const double f = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
    return lr0 * std::pow(lr1 / lr0, f);
}

} // namespace caf
