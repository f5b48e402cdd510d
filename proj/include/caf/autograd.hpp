#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "caf/tensor.hpp"

namespace caf {

// Tape-based reverse-mode autodiff. Every op builds a Node holding its
// result; backward() walks the tape in reverse topological order. Graphs
// are built per step and dropped afterwards, so nodes own their closures
// and there is no global state.

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(const Tensor<T>&)> backprop; // receives this node's grad

    void accumulate(const Tensor<T>& g) {
        if (!grad_alloc) {
            grad = Tensor<T>::zeros(val.shape);
            grad_alloc = true;
        }
        grad += g;
    }
};

template <typename T>
class Value {
public:
    Value() = default;
    explicit Value(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Value constant(Tensor<T> t) {
        auto n = std::make_shared<Node<T>>();
        n->val = std::move(t);
        return Value(std::move(n));
    }
    static Value leaf(Tensor<T> t, bool requires_grad = true) {
        auto n = std::make_shared<Node<T>>();
        n->val = std::move(t);
        n->requires_grad = requires_grad;
        return Value(std::move(n));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<T>& val() const { return n_->val; }
    Tensor<T>& mutable_val() { return n_->val; }
    bool requires_grad() const { return n_->requires_grad; }
    const Tensor<T>& grad() const {
        if (!n_->grad_alloc) n_->accumulate(Tensor<T>::zeros(n_->val.shape));
        return n_->grad;
    }
    void zero_grad() {
        if (n_->grad_alloc) n_->grad.fill(T(0));
    }
    std::shared_ptr<Node<T>> node() const { return n_; }

    T scalar() const {
        if (n_->val.numel() != 1) throw std::logic_error("scalar() on non-scalar value");
        return n_->val.data[0];
    }

    // Cut the graph: same tensor, no history.
    Value detach() const { return constant(n_->val); }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_op(Tensor<T> out, std::vector<std::shared_ptr<Node<T>>> parents,
                                 std::function<void(const Tensor<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(out);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

} // namespace detail

// Reverse pass from a scalar root. Seeds d(root)/d(root) = 1.
template <typename T>
void backward(const Value<T>& root) {
    auto rn = root.node();
    if (rn->val.numel() != 1) throw std::logic_error("backward() requires a scalar root");
    if (!rn->requires_grad) return;

    // Iterative post-order DFS over nodes that carry gradient.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack;
    stack.push_back({rn, 0});
    seen.insert(rn.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            auto p = node->parents[idx++];
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    rn->accumulate(Tensor<T>::full({1}, T(1)));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& n = *it;
        if (n->backprop && n->grad_alloc) n->backprop(n->grad);
    }
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
    a.val().check_same(b.val());
    Tensor<T> out = a.val();
    out += b.val();
    auto an = a.node(), bn = b.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn](const Tensor<T>& g) {
        if (an->requires_grad) an->accumulate(g);
        if (bn->requires_grad) bn->accumulate(g);
    }));
}

template <typename T>
Value<T> sub(const Value<T>& a, const Value<T>& b) {
    a.val().check_same(b.val());
    Tensor<T> out = a.val();
    out -= b.val();
    auto an = a.node(), bn = b.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn](const Tensor<T>& g) {
        if (an->requires_grad) an->accumulate(g);
        if (bn->requires_grad) {
            Tensor<T> neg = g;
            neg *= T(-1);
            bn->accumulate(neg);
        }
    }));
}

template <typename T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
    a.val().check_same(b.val());
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * b.val()[i];
    auto an = a.node(), bn = b.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn](const Tensor<T>& g) {
        if (an->requires_grad) {
            Tensor<T> ga(g.shape);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * bn->val[i];
            an->accumulate(ga);
        }
        if (bn->requires_grad) {
            Tensor<T> gb(g.shape);
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * an->val[i];
            bn->accumulate(gb);
        }
    }));
}

template <typename T>
Value<T> mul_scalar(const Value<T>& a, T s) {
    Tensor<T> out = a.val();
    out *= s;
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an, s](const Tensor<T>& g) {
        Tensor<T> ga = g;
        ga *= s;
        an->accumulate(ga);
    }));
}

template <typename T>
Value<T> add_scalar(const Value<T>& a, T s) {
    Tensor<T> out = a.val();
    for (auto& v : out.data) v += s;
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an](const Tensor<T>& g) { an->accumulate(g); }));
}

template <typename T>
Value<T> square(const Value<T>& a) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] * a.val()[i];
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = T(2) * an->val[i] * g[i];
        an->accumulate(ga);
    }));
}

template <typename T>
Value<T> sum(const Value<T>& a) {
    Tensor<T> out({1});
    T s = T(0);
    for (const auto& v : a.val().data) s += v;
    out[0] = s;
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an](const Tensor<T>& g) {
        an->accumulate(Tensor<T>::full(an->val.shape, g[0]));
    }));
}

template <typename T>
Value<T> mean(const Value<T>& a) {
    const T inv = T(1) / static_cast<T>(a.val().numel());
    return mul_scalar(sum(a), inv);
}

// Sum over all axes except the first: (N, ...) -> (N).
template <typename T>
Value<T> sum_per_example(const Value<T>& a) {
    const std::int64_t n = a.val().shape.at(0);
    const std::int64_t stride = a.val().numel() / n;
    Tensor<T> out({n});
    for (std::int64_t i = 0; i < n; ++i) {
        T s = T(0);
        for (std::int64_t j = 0; j < stride; ++j) s += a.val()[i * stride + j];
        out[i] = s;
    }
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an, n, stride](const Tensor<T>& g) {
        Tensor<T> ga(an->val.shape);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < stride; ++j) ga[i * stride + j] = g[i];
        an->accumulate(ga);
    }));
}

// Elementwise sqrt with a guarded gradient: entries below `guard` get a zero
// gradient, so sqrt of an exact zero (distance to itself) is safe.
template <typename T>
Value<T> sqrt_guarded(const Value<T>& a, T guard = T(1e-12)) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(std::max(T(0), a.val()[i]));
    auto an = a.node();
    Tensor<T> saved = out;
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an, saved, guard](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            if (an->val[i] < guard)
                ga[i] = T(0);
            else
                ga[i] = g[i] / (T(2) * saved[i]);
        }
        an->accumulate(ga);
    }));
}

template <typename T>
Value<T> relu(const Value<T>& a) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] > T(0) ? a.val()[i] : T(0);
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = an->val[i] > T(0) ? g[i] : T(0);
        an->accumulate(ga);
    }));
}

template <typename T>
Value<T> leaky_relu(const Value<T>& a, T slope = T(0.2)) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.val()[i] > T(0) ? a.val()[i] : slope * a.val()[i];
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an, slope](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = an->val[i] > T(0) ? g[i] : slope * g[i];
        an->accumulate(ga);
    }));
}

template <typename T>
Value<T> sigmoid(const Value<T>& a) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const T x = a.val()[i];
        out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    }
    auto an = a.node();
    Tensor<T> saved = out;
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an, saved](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * saved[i] * (T(1) - saved[i]);
        an->accumulate(ga);
    }));
}

// softplus(x) = log(1 + exp(x)), the stable form of -log(sigmoid(-x)).
template <typename T>
Value<T> softplus(const Value<T>& a) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const T x = a.val()[i];
        out[i] = std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
    }
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T x = an->val[i];
            const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
            ga[i] = g[i] * s;
        }
        an->accumulate(ga);
    }));
}

// clamp to [lo, hi] with the usual subgradient (zero outside the range).
template <typename T>
Value<T> clamp(const Value<T>& a, T lo, T hi) {
    Tensor<T> out(a.val().shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, a.val()[i]));
    auto an = a.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an}, [an, lo, hi](const Tensor<T>& g) {
        Tensor<T> ga(g.shape);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            ga[i] = (an->val[i] > lo && an->val[i] < hi) ? g[i] : T(0);
        an->accumulate(ga);
    }));
}

template <typename T>
Value<T> concat_channels(const Value<T>& a, const Value<T>& b) {
    const auto& sa = a.val().shape;
    const auto& sb = b.val().shape;
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw std::invalid_argument("concat_channels: incompatible shapes");
    const std::int64_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    Tensor<T> out({n, ca + cb, sa[2], sa[3]});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(a.val().ptr() + i * ca * hw, ca * hw, out.ptr() + i * (ca + cb) * hw);
        std::copy_n(b.val().ptr() + i * cb * hw, cb * hw, out.ptr() + i * (ca + cb) * hw + ca * hw);
    }
    auto an = a.node(), bn = b.node();
    return Value<T>(detail::make_op<T>(std::move(out), {an, bn}, [an, bn, n, ca, cb, hw](const Tensor<T>& g) {
        if (an->requires_grad) {
            Tensor<T> ga(an->val.shape);
            for (std::int64_t i = 0; i < n; ++i)
                std::copy_n(g.ptr() + i * (ca + cb) * hw, ca * hw, ga.ptr() + i * ca * hw);
            an->accumulate(ga);
        }
        if (bn->requires_grad) {
            Tensor<T> gb(bn->val.shape);
            for (std::int64_t i = 0; i < n; ++i)
                std::copy_n(g.ptr() + i * (ca + cb) * hw + ca * hw, cb * hw, gb.ptr() + i * cb * hw);
            bn->accumulate(gb);
        }
    }));
}

// out[n,c,:,:] = x[n,c,:,:] * s[n,c], with s a plain (constant) tensor.
template <typename T>
Value<T> scale_channels(const Value<T>& x, const Tensor<T>& s) {
    const auto& sh = x.val().shape;
    if (sh.size() != 4 || s.shape.size() != 2 || s.shape[0] != sh[0] || s.shape[1] != sh[1])
        throw std::invalid_argument("scale_channels: scale shape must be (N,C)");
    const std::int64_t n = sh[0], c = sh[1], hw = sh[2] * sh[3];
    Tensor<T> out(sh);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const T f = s.at(i, j);
            const T* src = x.val().ptr() + (i * c + j) * hw;
            T* dst = out.ptr() + (i * c + j) * hw;
            for (std::int64_t k = 0; k < hw; ++k) dst[k] = src[k] * f;
        }
    auto xn = x.node();
    Tensor<T> sc = s;
    return Value<T>(detail::make_op<T>(std::move(out), {xn}, [xn, sc, n, c, hw](const Tensor<T>& g) {
        Tensor<T> gx(xn->val.shape);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
                const T f = sc.at(i, j);
                const T* src = g.ptr() + (i * c + j) * hw;
                T* dst = gx.ptr() + (i * c + j) * hw;
                for (std::int64_t k = 0; k < hw; ++k) dst[k] = src[k] * f;
            }
        xn->accumulate(gx);
    }));
}

} // namespace caf
