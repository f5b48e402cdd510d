#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "caf/classifier.hpp"

namespace caf {

struct DenoiserArch {
    int image_size = 32;
    int channels = 3;
    std::vector<int> widths = {32, 64, 128}; // encoder levels, shallow to deep

    void validate() const {
        if (widths.size() < 2) throw std::invalid_argument("denoiser: need at least two levels");
        if (image_size % (1 << (static_cast<int>(widths.size()) - 1)) != 0)
            throw std::invalid_argument("denoiser: image size not divisible by the downsampling factor");
    }

    json to_json() const {
        return {{"image_size", image_size}, {"channels", channels}, {"widths", widths}};
    }
    static DenoiserArch from_json(const json& j) {
        DenoiserArch a;
        a.image_size = j.at("image_size");
        a.channels = j.at("channels");
        a.widths = j.at("widths").get<std::vector<int>>();
        a.validate();
        return a;
    }
};

// Encoder-decoder built from conv3x3 -> batch norm -> ReLU blocks with skip
// connections. Predicts the residual noise r(x~); the restored example is
// clamp(x~ - r(x~), 0, 1). The output conv starts at zero, so an untrained
// denoiser is the identity.
template <typename T>
class DenoiserNet {
public:
    DenoiserArch arch;

    DenoiserNet() = default;
    DenoiserNet(DenoiserArch a, std::uint64_t seed) : arch(std::move(a)) {
        arch.validate();
        Rng rng(seed ^ 0xdece11ce5ULL);
        const auto& w = arch.widths;
        const int levels = static_cast<int>(w.size());
        int cin = arch.channels;
        for (int i = 0; i < levels; ++i) {
            enc_.emplace_back(cin, w[static_cast<std::size_t>(i)], rng);
            cin = w[static_cast<std::size_t>(i)];
        }
        mid_ = ConvBnRelu<T>(w.back(), w.back(), rng);
        for (int i = levels - 2; i >= 0; --i)
            dec_.emplace_back(w[static_cast<std::size_t>(i + 1)] + w[static_cast<std::size_t>(i)],
                              w[static_cast<std::size_t>(i)], rng);
        out_ = Conv2dLayer<T>(w.front(), arch.channels, 3, rng, 1, 1, /*zero_init=*/true);
    }

    Value<T> forward_graph(const Value<T>& x, bool training) {
        check_input(x.val());
        std::vector<Value<T>> skips;
        Value<T> h = x;
        for (std::size_t i = 0; i < enc_.size(); ++i) {
            if (i > 0) h = avg_pool2(h);
            h = enc_[i](h, training);
            skips.push_back(h);
        }
        h = mid_(h, training);
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            h = upsample_nearest2(h);
            h = concat_channels(h, skips[skips.size() - 2 - i]);
            h = dec_[i](h, training);
        }
        Value<T> residual = out_(h);
        return clamp(sub(x, residual), T(0), T(1));
    }

    // Inference-mode restoration without gradient tracking.
    Tensor<T> denoise(const Tensor<T>& x) {
        FrozenGuard<T> guard(state());
        return forward_graph(Value<T>::constant(x), false).val();
    }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        for (std::size_t i = 0; i < enc_.size(); ++i)
            r.merge("enc" + std::to_string(i) + ".", enc_[i].state());
        r.merge("mid.", mid_.state());
        for (std::size_t i = 0; i < dec_.size(); ++i)
            r.merge("dec" + std::to_string(i) + ".", dec_[i].state());
        r.merge("out.", out_.state());
        return r;
    }

    void check_input(const Tensor<T>& x) const {
        if (x.shape.size() != 4 || x.shape[1] != arch.channels || x.shape[2] != arch.image_size ||
            x.shape[3] != arch.image_size)
            throw std::invalid_argument("denoiser: input shape " + shape_str(x.shape) +
                                        " does not match checkpoint architecture " + arch.to_json().dump());
    }

private:
    std::vector<ConvBnRelu<T>> enc_;
    ConvBnRelu<T> mid_;
    std::vector<ConvBnRelu<T>> dec_;
    Conv2dLayer<T> out_;
};

// VGG-style critic: conv -> batch norm -> leaky ReLU blocks with pooling,
// then a fully connected scalar score per image.
template <typename T>
class Discriminator {
public:
    DenoiserArch arch; // reuse: image_size/channels/widths

    Discriminator() = default;
    Discriminator(DenoiserArch a, std::uint64_t seed) : arch(std::move(a)) {
        arch.validate();
        Rng rng(seed ^ 0xd15c0ULL);
        int cin = arch.channels;
        for (int width : arch.widths) {
            blocks_.emplace_back(cin, width, rng, T(0.2));
            cin = width;
        }
        const int down = 1 << static_cast<int>(arch.widths.size());
        const int spatial = arch.image_size / down;
        if (spatial < 1) throw std::invalid_argument("discriminator: too many blocks for this image size");
        head_ = LinearLayer<T>(static_cast<std::int64_t>(arch.widths.back()) * spatial * spatial, 1, rng);
    }

    // (N, C, H, W) -> (N, 1) scores.
    Value<T> forward_graph(const Value<T>& x, bool training) {
        Value<T> h = x;
        for (auto& blk : blocks_) {
            h = blk(h, training);
            h = avg_pool2(h);
        }
        return head_(flatten(h));
    }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            r.merge("block" + std::to_string(i) + ".", blocks_[i].state());
        r.merge("head.", head_.state());
        return r;
    }

private:
    std::vector<ConvBnRelu<T>> blocks_;
    LinearLayer<T> head_;
};

} // namespace caf
