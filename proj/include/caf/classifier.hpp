#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "caf/checkpoint.hpp"
#include "caf/dataset.hpp"
#include "caf/nn.hpp"

namespace caf {

struct TrainingDivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Conv stack -> global average pool -> linear head. The head structure is
// what makes per-channel class weights exist: logit_c = sum_k W[c,k] *
// GAP(f^k) + b[c], so the weight row of a class scores each feature channel.
struct ClassifierArch {
    int image_size = 32;
    int channels = 3;
    int num_classes = 4;
    std::vector<int> widths = {32, 64, 128, 128};

    int feature_channels() const { return widths.back(); }
    int feature_size() const { return image_size >> (static_cast<int>(widths.size()) - 1); }

    void validate() const {
        if (widths.empty()) throw std::invalid_argument("arch: need at least one conv block");
        if (image_size % (1 << (static_cast<int>(widths.size()) - 1)) != 0)
            throw std::invalid_argument("arch: image size not divisible by the downsampling factor");
        if (feature_size() < 1) throw std::invalid_argument("arch: too many blocks for this image size");
    }

    json to_json() const {
        return {{"image_size", image_size},
                {"channels", channels},
                {"num_classes", num_classes},
                {"widths", widths}};
    }
    static ClassifierArch from_json(const json& j) {
        ClassifierArch a;
        a.image_size = j.at("image_size");
        a.channels = j.at("channels");
        a.num_classes = j.at("num_classes");
        a.widths = j.at("widths").get<std::vector<int>>();
        a.validate();
        return a;
    }
};

// Temporarily drops requires_grad on a parameter set (inference / frozen
// network passes); restores previous flags on scope exit.
template <typename T>
class FrozenGuard {
public:
    explicit FrozenGuard(const StateRegistry<T>& reg) {
        for (auto& [n, v] : reg.params) {
            saved_.emplace_back(v.node(), v.node()->requires_grad);
            v.node()->requires_grad = false;
        }
    }
    ~FrozenGuard() {
        for (auto& [node, flag] : saved_) node->requires_grad = flag;
    }
    FrozenGuard(const FrozenGuard&) = delete;
    FrozenGuard& operator=(const FrozenGuard&) = delete;

private:
    std::vector<std::pair<std::shared_ptr<Node<T>>, bool>> saved_;
};

template <typename T>
struct BackboneOut {
    Value<T> logits;   // (N, num_classes)
    Value<T> features; // (N, K, H', W') last-conv activations
};

template <typename T>
class CamClassifier {
public:
    ClassifierArch arch;

    CamClassifier() = default;
    CamClassifier(ClassifierArch a, std::uint64_t seed) : arch(std::move(a)) {
        arch.validate();
        Rng rng(seed ^ 0xc1a551f1e5ULL);
        int cin = arch.channels;
        for (std::size_t i = 0; i < arch.widths.size(); ++i) {
            blocks_.emplace_back(cin, arch.widths[i], rng);
            cin = arch.widths[i];
        }
        head_ = LinearLayer<T>(arch.feature_channels(), arch.num_classes, rng);
    }

    BackboneOut<T> forward_graph(const Value<T>& x, bool training) {
        check_input(x.val());
        Value<T> h = x;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            if (i > 0) h = avg_pool2(h);
            h = blocks_[i](h, training);
        }
        Value<T> pooled = global_avg_pool(h);
        return {head_(pooled), h};
    }

    // Inference without gradient tracking.
    std::pair<Tensor<T>, Tensor<T>> forward_eval(const Tensor<T>& x) {
        FrozenGuard<T> guard(state());
        auto out = forward_graph(Value<T>::constant(x), false);
        return {out.logits.val(), out.features.val()};
    }

    Tensor<T> logits_eval(const Tensor<T>& x) { return forward_eval(x).first; }

    std::vector<int> predict(const Tensor<T>& x) { return argmax_rows(logits_eval(x)); }

    const Tensor<T>& class_weights() const { return head_.weight.val(); } // (num_classes, K)
    const Tensor<T>& class_bias() const { return head_.bias.val(); }

    StateRegistry<T> state() {
        StateRegistry<T> r;
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            r.merge("block" + std::to_string(i) + ".", blocks_[i].state());
        r.merge("head.", head_.state());
        return r;
    }

    void check_input(const Tensor<T>& x) const {
        if (x.shape.size() != 4 || x.shape[1] != arch.channels || x.shape[2] != arch.image_size ||
            x.shape[3] != arch.image_size)
            throw std::invalid_argument("classifier: input shape " + shape_str(x.shape) + " does not match arch (" +
                                        std::to_string(arch.channels) + "," + std::to_string(arch.image_size) + "," +
                                        std::to_string(arch.image_size) + ")");
    }

private:
    std::vector<ConvBnRelu<T>> blocks_;
    LinearLayer<T> head_;
};

// Batched top-1 accuracy against dataset labels.
template <typename T>
double accuracy(CamClassifier<T>& m, const Dataset& ds, std::int64_t batch = 256) {
    std::int64_t correct = 0;
    const std::int64_t chw = ds.channels() * ds.height() * ds.width();
    for (std::int64_t start = 0; start < ds.size(); start += batch) {
        const std::int64_t n = std::min(batch, ds.size() - start);
        Tensor<std::uint8_t> sub({n, ds.channels(), ds.height(), ds.width()});
        std::copy_n(ds.images.ptr() + start * chw, n * chw, sub.ptr());
        auto pred = m.predict(to_float(sub).template cast<T>());
        for (std::int64_t i = 0; i < n; ++i)
            if (pred[static_cast<std::size_t>(i)] == ds.labels[static_cast<std::size_t>(start + i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

struct ClassifierHyper {
    int epochs = 10;
    int batch_size = 64;
    double lr = 1e-3;
    double lr_final = 1e-4;
    std::uint64_t seed = 1;

    json to_json() const {
        return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"lr_final", lr_final}, {"seed", seed}};
    }
};

struct TrainStats {
    std::vector<double> epoch_loss;
    double final_train_acc = 0.0;
    double final_val_acc = 0.0;
};

// Supervised training of the backbone. The network is trained once and then
// stays fixed for every attack/defense experiment built on top of it.
template <typename T>
TrainStats train_classifier(CamClassifier<T>& m, const Dataset& train, const Dataset& val,
                            const ClassifierHyper& hyper) {
    auto reg = m.state();
    reg.set_requires_grad(true);
    Adam<T> opt(reg.param_values());
    Rng rng(hyper.seed);

    const std::int64_t chw = train.channels() * train.height() * train.width();
    Tensor<float> all = to_float(train.images);
    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);

    TrainStats stats;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        Rng erng = rng.fork(static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        const double lr = decayed_lr(hyper.lr, hyper.lr_final, epoch, hyper.epochs);
        double loss_sum = 0.0;
        std::int64_t batches = 0;
        for (std::int64_t start = 0; start < train.size(); start += hyper.batch_size) {
            const std::int64_t n = std::min<std::int64_t>(hyper.batch_size, train.size() - start);
            Tensor<T> xb({n, train.channels(), train.height(), train.width()});
            std::vector<int> yb(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t src = order[static_cast<std::size_t>(start + i)];
                for (std::int64_t j = 0; j < chw; ++j)
                    xb[i * chw + j] = static_cast<T>(all[src * chw + j]);
                yb[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(src)];
            }
            auto out = m.forward_graph(Value<T>::constant(std::move(xb)), true);
            Value<T> loss = softmax_cross_entropy(out.logits, yb);
            const double lval = static_cast<double>(loss.scalar());
            if (!std::isfinite(lval))
                throw TrainingDivergedError("train_classifier: non-finite loss at epoch " + std::to_string(epoch) +
                                            ", batch " + std::to_string(batches));
            opt.zero_grad();
            backward(loss);
            opt.step(lr);
            loss_sum += lval;
            ++batches;
        }
        stats.epoch_loss.push_back(loss_sum / static_cast<double>(std::max<std::int64_t>(1, batches)));
    }
    stats.final_train_acc = accuracy(m, train);
    stats.final_val_acc = accuracy(m, val);
    return stats;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <typename T>
void save_classifier(CamClassifier<T>& m, const json& extra_meta, const std::filesystem::path& path) {
    TensorArchive a;
    a.meta = extra_meta;
    a.meta["kind"] = "classifier";
    a.meta["arch"] = m.arch.to_json();
    auto reg = m.state();
    for (auto& [name, v] : reg.params) a.tensors.emplace_back(name, v.val().template cast<float>());
    for (auto& [name, t] : reg.buffers) a.tensors.emplace_back(name, t->template cast<float>());
    save_archive(a, path);
}

template <typename T>
std::pair<CamClassifier<T>, json> load_classifier(const std::filesystem::path& path) {
    TensorArchive a = load_archive(path);
    if (a.meta.value("kind", "") != "classifier")
        throw std::runtime_error("load_classifier: " + path.string() + " is not a classifier checkpoint");
    CamClassifier<T> m(ClassifierArch::from_json(a.meta.at("arch")), 0);
    auto reg = m.state();
    for (auto& [name, v] : reg.params) {
        const auto& t = a.find(name);
        if (t.shape != v.val().shape)
            throw std::runtime_error("load_classifier: tensor '" + name + "' has shape " + shape_str(t.shape) +
                                     ", expected " + shape_str(v.val().shape));
        v.mutable_val() = t.template cast<T>();
    }
    for (auto& [name, t] : reg.buffers) *t = a.find(name).template cast<T>();
    return {std::move(m), a.meta};
}

inline std::uint32_t classifier_file_checksum(const std::filesystem::path& path) {
    return archive_checksum(load_archive(path));
}

} // namespace caf
