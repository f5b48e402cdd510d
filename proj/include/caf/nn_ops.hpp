#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

#include "caf/autograd.hpp"

namespace caf {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

inline void set_gemm_threads(int n) { Eigen::setNbThreads(n); }

namespace detail {

// Scatter one image's patches into a (Cin*KH*KW) x (OH*OW) column matrix.
template <typename T>
void im2col(const T* img, std::int64_t cin, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t oh, std::int64_t ow, T* col) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
        for (std::int64_t r = 0; r < kh; ++r) {
            for (std::int64_t s = 0; s < kw; ++s) {
                T* dst = col + ((ci * kh + r) * kw + s) * oh * ow;
                for (std::int64_t y = 0; y < oh; ++y) {
                    const std::int64_t iy = y * stride + r - pad;
                    if (iy < 0 || iy >= h) {
                        for (std::int64_t x = 0; x < ow; ++x) dst[y * ow + x] = T(0);
                        continue;
                    }
                    const T* src = img + (ci * h + iy) * w;
                    for (std::int64_t x = 0; x < ow; ++x) {
                        const std::int64_t ix = x * stride + s - pad;
                        dst[y * ow + x] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Transpose of im2col: accumulate columns back into the image.
template <typename T>
void col2im(const T* col, std::int64_t cin, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
            std::int64_t oh, std::int64_t ow, T* img) {
    for (std::int64_t ci = 0; ci < cin; ++ci) {
        for (std::int64_t r = 0; r < kh; ++r) {
            for (std::int64_t s = 0; s < kw; ++s) {
                const T* src = col + ((ci * kh + r) * kw + s) * oh * ow;
                for (std::int64_t y = 0; y < oh; ++y) {
                    const std::int64_t iy = y * stride + r - pad;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = img + (ci * h + iy) * w;
                    for (std::int64_t x = 0; x < ow; ++x) {
                        const std::int64_t ix = x * stride + s - pad;
                        if (ix >= 0 && ix < w) dst[ix] += src[y * ow + x];
                    }
                }
            }
        }
    }
}

} // namespace detail

// 2-d convolution, NCHW, weight (Cout, Cin, KH, KW), bias (Cout).
template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& weight, const Value<T>& bias,
                std::int64_t stride = 1, std::int64_t pad = 1) {
    const auto& xs = x.val().shape;
    const auto& ws = weight.val().shape;
    if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: expects 4-d input and weight");
    if (xs[1] != ws[1])
        throw std::invalid_argument("conv2d: input channels " + std::to_string(xs[1]) +
                                    " != weight channels " + std::to_string(ws[1]));
    const std::int64_t n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
    const std::int64_t cout = ws[0], kh = ws[2], kw = ws[3];
    const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::int64_t ow = (w + 2 * pad - kw) / stride + 1;
    const std::int64_t ck = cin * kh * kw, ohw = oh * ow;

    Tensor<T> out({n, cout, oh, ow});
    std::vector<T> col(static_cast<std::size_t>(ck * ohw));
    ECMap<T> wm(weight.val().ptr(), cout, ck);
    for (std::int64_t i = 0; i < n; ++i) {
        detail::im2col(x.val().ptr() + i * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow, col.data());
        ECMap<T> cm(col.data(), ck, ohw);
        EMap<T> om(out.ptr() + i * cout * ohw, cout, ohw);
        om.noalias() = wm * cm;
        for (std::int64_t c = 0; c < cout; ++c) om.row(c).array() += bias.val()[c];
    }

    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    return Value<T>(detail::make_op<T>(
        std::move(out), {xn, wn, bn},
        [xn, wn, bn, n, cin, h, w, cout, kh, kw, stride, pad, oh, ow, ck, ohw](const Tensor<T>& g) {
            std::vector<T> col(static_cast<std::size_t>(ck * ohw));
            ECMap<T> wm(wn->val.ptr(), cout, ck);
            Tensor<T> gx, gw, gb;
            if (xn->requires_grad) gx = Tensor<T>::zeros(xn->val.shape);
            if (wn->requires_grad) gw = Tensor<T>::zeros(wn->val.shape);
            if (bn->requires_grad) gb = Tensor<T>::zeros(bn->val.shape);
            for (std::int64_t i = 0; i < n; ++i) {
                ECMap<T> gm(g.ptr() + i * cout * ohw, cout, ohw);
                if (wn->requires_grad)
                    detail::im2col(xn->val.ptr() + i * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
                                   col.data());
                if (wn->requires_grad) {
                    ECMap<T> cm(col.data(), ck, ohw);
                    EMap<T> gwm(gw.ptr(), cout, ck);
                    gwm.noalias() += gm * cm.transpose();
                }
                if (bn->requires_grad)
                    for (std::int64_t c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
                if (xn->requires_grad) {
                    EMap<T> dcol(col.data(), ck, ohw);
                    dcol.noalias() = wm.transpose() * gm;
                    detail::col2im(col.data(), cin, h, w, kh, kw, stride, pad, oh, ow,
                                   gx.ptr() + i * cin * h * w);
                }
            }
            if (xn->requires_grad) xn->accumulate(gx);
            if (wn->requires_grad) wn->accumulate(gw);
            if (bn->requires_grad) bn->accumulate(gb);
        }));
}

// Fully connected: x (N, D), weight (C, D), bias (C) -> (N, C).
template <typename T>
Value<T> linear(const Value<T>& x, const Value<T>& weight, const Value<T>& bias) {
    const auto& xs = x.val().shape;
    const auto& ws = weight.val().shape;
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1])
        throw std::invalid_argument("linear: shape mismatch " + shape_str(xs) + " x " + shape_str(ws));
    const std::int64_t n = xs[0], d = xs[1], c = ws[0];
    Tensor<T> out({n, c});
    ECMap<T> xm(x.val().ptr(), n, d);
    ECMap<T> wm(weight.val().ptr(), c, d);
    EMap<T> om(out.ptr(), n, c);
    om.noalias() = xm * wm.transpose();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) out.at(i, j) += bias.val()[j];

    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    return Value<T>(detail::make_op<T>(std::move(out), {xn, wn, bn}, [xn, wn, bn, n, d, c](const Tensor<T>& g) {
        ECMap<T> gm(g.ptr(), n, c);
        if (xn->requires_grad) {
            Tensor<T> gx({n, d});
            EMap<T> gxm(gx.ptr(), n, d);
            ECMap<T> wm(wn->val.ptr(), c, d);
            gxm.noalias() = gm * wm;
            xn->accumulate(gx);
        }
        if (wn->requires_grad) {
            Tensor<T> gw({c, d});
            EMap<T> gwm(gw.ptr(), c, d);
            ECMap<T> xm(xn->val.ptr(), n, d);
            gwm.noalias() = gm.transpose() * xm;
            wn->accumulate(gw);
        }
        if (bn->requires_grad) {
            Tensor<T> gb({c});
            for (std::int64_t j = 0; j < c; ++j) gb[j] = gm.col(j).sum();
            bn->accumulate(gb);
        }
    }));
}

// Batch normalization over (N, H, W) per channel. In training mode the batch
// statistics are used and running stats (plain tensors owned by the layer)
// are updated in place; in inference mode the running stats are used, which
// keeps forward deterministic.
template <typename T>
Value<T> batchnorm2d(const Value<T>& x, const Value<T>& gamma, const Value<T>& beta,
                     Tensor<T>* running_mean, Tensor<T>* running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& xs = x.val().shape;
    if (xs.size() != 4) throw std::invalid_argument("batchnorm2d: expects 4-d input");
    const std::int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    const std::int64_t m = n * hw;

    Tensor<T> mu({c}), inv_std({c});
    if (training) {
        for (std::int64_t j = 0; j < c; ++j) {
            double s = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const T* p = x.val().ptr() + (i * c + j) * hw;
                for (std::int64_t k = 0; k < hw; ++k) s += static_cast<double>(p[k]);
            }
            const double mean = s / static_cast<double>(m);
            double v = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                const T* p = x.val().ptr() + (i * c + j) * hw;
                for (std::int64_t k = 0; k < hw; ++k) {
                    const double d = static_cast<double>(p[k]) - mean;
                    v += d * d;
                }
            }
            const double var = v / static_cast<double>(m);
            mu[j] = static_cast<T>(mean);
            inv_std[j] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            if (running_mean && running_var) {
                const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
                (*running_mean)[j] =
                    static_cast<T>((1.0 - static_cast<double>(momentum)) * static_cast<double>((*running_mean)[j]) +
                                   static_cast<double>(momentum) * mean);
                (*running_var)[j] =
                    static_cast<T>((1.0 - static_cast<double>(momentum)) * static_cast<double>((*running_var)[j]) +
                                   static_cast<double>(momentum) * unbiased);
            }
        }
    } else {
        if (!running_mean || !running_var) throw std::logic_error("batchnorm2d: inference requires running stats");
        for (std::int64_t j = 0; j < c; ++j) {
            mu[j] = (*running_mean)[j];
            inv_std[j] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*running_var)[j]) + static_cast<double>(eps)));
        }
    }

    Tensor<T> out(xs);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const T* src = x.val().ptr() + (i * c + j) * hw;
            T* dst = out.ptr() + (i * c + j) * hw;
            const T a = gamma.val()[j] * inv_std[j];
            const T b = beta.val()[j] - mu[j] * a;
            for (std::int64_t k = 0; k < hw; ++k) dst[k] = a * src[k] + b;
        }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return Value<T>(detail::make_op<T>(
        std::move(out), {xn, gn, bn}, [xn, gn, bn, mu, inv_std, n, c, hw, m, training](const Tensor<T>& g) {
            // Per channel: xhat = (x - mu) * inv_std.
            Tensor<T> dgamma({c}), dbeta({c});
            for (std::int64_t j = 0; j < c; ++j) {
                double sg = 0.0, sgx = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const T* gp = g.ptr() + (i * c + j) * hw;
                    const T* xp = xn->val.ptr() + (i * c + j) * hw;
                    for (std::int64_t k = 0; k < hw; ++k) {
                        sg += static_cast<double>(gp[k]);
                        sgx += static_cast<double>(gp[k]) * static_cast<double>((xp[k] - mu[j]) * inv_std[j]);
                    }
                }
                dbeta[j] = static_cast<T>(sg);
                dgamma[j] = static_cast<T>(sgx);
            }
            if (xn->requires_grad) {
                Tensor<T> gx(xn->val.shape);
                for (std::int64_t j = 0; j < c; ++j) {
                    const T a = gn->val[j] * inv_std[j];
                    if (training) {
                        const T mean_dy = dbeta[j] / static_cast<T>(m);
                        const T mean_dyxhat = dgamma[j] / static_cast<T>(m);
                        for (std::int64_t i = 0; i < n; ++i) {
                            const T* gp = g.ptr() + (i * c + j) * hw;
                            const T* xp = xn->val.ptr() + (i * c + j) * hw;
                            T* dst = gx.ptr() + (i * c + j) * hw;
                            for (std::int64_t k = 0; k < hw; ++k) {
                                const T xhat = (xp[k] - mu[j]) * inv_std[j];
                                dst[k] = a * (gp[k] - mean_dy - xhat * mean_dyxhat);
                            }
                        }
                    } else {
                        for (std::int64_t i = 0; i < n; ++i) {
                            const T* gp = g.ptr() + (i * c + j) * hw;
                            T* dst = gx.ptr() + (i * c + j) * hw;
                            for (std::int64_t k = 0; k < hw; ++k) dst[k] = a * gp[k];
                        }
                    }
                }
                xn->accumulate(gx);
            }
            if (gn->requires_grad) gn->accumulate(dgamma);
            if (bn->requires_grad) bn->accumulate(dbeta);
        }));
}

// Global average pool: (N, C, H, W) -> (N, C).
template <typename T>
Value<T> global_avg_pool(const Value<T>& x) {
    const auto& xs = x.val().shape;
    if (xs.size() != 4) throw std::invalid_argument("global_avg_pool: expects 4-d input");
    const std::int64_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    Tensor<T> out({n, c});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const T* p = x.val().ptr() + (i * c + j) * hw;
            T s = T(0);
            for (std::int64_t k = 0; k < hw; ++k) s += p[k];
            out.at(i, j) = s / static_cast<T>(hw);
        }
    auto xn = x.node();
    return Value<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, c, hw](const Tensor<T>& g) {
        Tensor<T> gx(xn->val.shape);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
                const T v = g.at(i, j) / static_cast<T>(hw);
                T* dst = gx.ptr() + (i * c + j) * hw;
                for (std::int64_t k = 0; k < hw; ++k) dst[k] = v;
            }
        xn->accumulate(gx);
    }));
}

// 2x2 average pooling with stride 2 (H and W must be even).
template <typename T>
Value<T> avg_pool2(const Value<T>& x) {
    const auto& xs = x.val().shape;
    if (xs.size() != 4 || xs[2] % 2 || xs[3] % 2) throw std::invalid_argument("avg_pool2: H and W must be even");
    const std::int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
    Tensor<T> out({n, c, oh, ow});
    for (std::int64_t i = 0; i < n * c; ++i) {
        const T* src = x.val().ptr() + i * h * w;
        T* dst = out.ptr() + i * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y)
            for (std::int64_t x2 = 0; x2 < ow; ++x2)
                dst[y * ow + x2] = (src[(2 * y) * w + 2 * x2] + src[(2 * y) * w + 2 * x2 + 1] +
                                    src[(2 * y + 1) * w + 2 * x2] + src[(2 * y + 1) * w + 2 * x2 + 1]) /
                                   T(4);
    }
    auto xn = x.node();
    return Value<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, c, h, w, oh, ow](const Tensor<T>& g) {
        Tensor<T> gx(xn->val.shape);
        for (std::int64_t i = 0; i < n * c; ++i) {
            const T* src = g.ptr() + i * oh * ow;
            T* dst = gx.ptr() + i * h * w;
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t x2 = 0; x2 < ow; ++x2) {
                    const T v = src[y * ow + x2] / T(4);
                    dst[(2 * y) * w + 2 * x2] = v;
                    dst[(2 * y) * w + 2 * x2 + 1] = v;
                    dst[(2 * y + 1) * w + 2 * x2] = v;
                    dst[(2 * y + 1) * w + 2 * x2 + 1] = v;
                }
        }
        xn->accumulate(gx);
    }));
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Value<T> upsample_nearest2(const Value<T>& x) {
    const auto& xs = x.val().shape;
    if (xs.size() != 4) throw std::invalid_argument("upsample_nearest2: expects 4-d input");
    const std::int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    Tensor<T> out({n, c, h * 2, w * 2});
    for (std::int64_t i = 0; i < n * c; ++i) {
        const T* src = x.val().ptr() + i * h * w;
        T* dst = out.ptr() + i * 4 * h * w;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x2 = 0; x2 < w; ++x2) {
                const T v = src[y * w + x2];
                dst[(2 * y) * 2 * w + 2 * x2] = v;
                dst[(2 * y) * 2 * w + 2 * x2 + 1] = v;
                dst[(2 * y + 1) * 2 * w + 2 * x2] = v;
                dst[(2 * y + 1) * 2 * w + 2 * x2 + 1] = v;
            }
    }
    auto xn = x.node();
    return Value<T>(detail::make_op<T>(std::move(out), {xn}, [xn, n, c, h, w](const Tensor<T>& g) {
        Tensor<T> gx(xn->val.shape);
        for (std::int64_t i = 0; i < n * c; ++i) {
            const T* src = g.ptr() + i * 4 * h * w;
            T* dst = gx.ptr() + i * h * w;
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x2 = 0; x2 < w; ++x2)
                    dst[y * w + x2] = src[(2 * y) * 2 * w + 2 * x2] + src[(2 * y) * 2 * w + 2 * x2 + 1] +
                                      src[(2 * y + 1) * 2 * w + 2 * x2] + src[(2 * y + 1) * 2 * w + 2 * x2 + 1];
        }
        xn->accumulate(gx);
    }));
}

// Flatten (N, C, H, W) -> (N, C*H*W).
template <typename T>
Value<T> flatten(const Value<T>& x) {
    const auto& xs = x.val().shape;
    const std::int64_t n = xs.at(0);
    Tensor<T> out({n, x.val().numel() / n}, x.val().data);
    auto xn = x.node();
    return Value<T>(detail::make_op<T>(std::move(out), {xn}, [xn](const Tensor<T>& g) {
        Tensor<T> gx(xn->val.shape, g.data);
        xn->accumulate(gx);
    }));
}

// Mean cross-entropy over the batch, with fused stable softmax.
template <typename T>
Value<T> softmax_cross_entropy(const Value<T>& logits, const std::vector<int>& labels) {
    const auto& ls = logits.val().shape;
    if (ls.size() != 2 || static_cast<std::size_t>(ls[0]) != labels.size())
        throw std::invalid_argument("softmax_cross_entropy: logits (N,C) and N labels required");
    const std::int64_t n = ls[0], c = ls[1];
    Tensor<T> probs({n, c});
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T* row = logits.val().ptr() + i * c;
        T mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        const double logz = std::log(z) + static_cast<double>(mx);
        for (std::int64_t j = 0; j < c; ++j)
            probs.at(i, j) = static_cast<T>(std::exp(static_cast<double>(row[j]) - logz));
        total += logz - static_cast<double>(row[labels[static_cast<std::size_t>(i)]]);
    }
    Tensor<T> out({1});
    out[0] = static_cast<T>(total / static_cast<double>(n));
    auto ln = logits.node();
    return Value<T>(detail::make_op<T>(std::move(out), {ln}, [ln, probs, labels, n, c](const Tensor<T>& g) {
        Tensor<T> gl({n, c});
        const T scale = g[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
                T v = probs.at(i, j);
                if (j == labels[static_cast<std::size_t>(i)]) v -= T(1);
                gl.at(i, j) = v * scale;
            }
        ln->accumulate(gl);
    }));
}

// Plain-tensor softmax probabilities (no graph).
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    const std::int64_t n = logits.shape.at(0), c = logits.shape.at(1);
    Tensor<T> probs({n, c});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* row = logits.ptr() + i * c;
        T mx = row[0];
        for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        for (std::int64_t j = 0; j < c; ++j)
            probs.at(i, j) = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
    }
    return probs;
}

// Row-wise argmax; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& m) {
    const std::int64_t n = m.shape.at(0), c = m.shape.at(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        int best = 0;
        for (std::int64_t j = 1; j < c; ++j)
            if (m.at(i, j) > m.at(i, best)) best = static_cast<int>(j);
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

} // namespace caf
