#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caf/hash.hpp"
#include "caf/rng.hpp"
#include "caf/tensor.hpp"

namespace caf {

struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CorruptPayloadError : DatasetError {
    using DatasetError::DatasetError;
};
struct ShapeMismatchError : DatasetError {
    using DatasetError::DatasetError;
};

// Labeled byte-image set. Images are (N, C, H, W) in [0, 255]; conversion to
// float divides by 255 exactly, so u8 -> float -> u8 round-trips losslessly.
struct Dataset {
    Tensor<std::uint8_t> images;
    std::vector<int> labels;
    int num_classes = 0;
    nlohmann::json meta;

    std::int64_t size() const { return images.shape.empty() ? 0 : images.shape[0]; }
    std::int64_t channels() const { return images.shape.at(1); }
    std::int64_t height() const { return images.shape.at(2); }
    std::int64_t width() const { return images.shape.at(3); }

    void validate() const {
        if (images.shape.size() != 4) throw ShapeMismatchError("dataset: images must be (N,C,H,W)");
        if (size() < 1) throw ShapeMismatchError("dataset: N must be >= 1");
        if (channels() != 1 && channels() != 3) throw ShapeMismatchError("dataset: channels must be 1 or 3");
        if (height() != width()) throw ShapeMismatchError("dataset: images must be square");
        if (static_cast<std::int64_t>(labels.size()) != size())
            throw ShapeMismatchError("dataset: label count != image count");
        for (int l : labels)
            if (l < 0 || l >= num_classes) throw ShapeMismatchError("dataset: label out of range");
    }
};

struct ShapeGenConfig {
    int num_classes = 4;
    int samples_per_class = 500;
    int image_size = 32;
    int channels = 3;
    double noise_std = 0.06;
    std::uint64_t seed = 7;

    nlohmann::json to_json() const {
        return {{"num_classes", num_classes}, {"samples_per_class", samples_per_class},
                {"image_size", image_size},   {"channels", channels},
                {"noise_std", noise_std},     {"seed", seed}};
    }
};

namespace detail {

constexpr int kShapeKinds = 6; // circle, square, triangle, cross, diamond, ring

// Soft-edged coverage for one pixel of one shape kind, in [0,1]. Coordinates
// are relative to the shape centre, `r` is the shape radius in pixels.
inline double shape_coverage(int kind, double dx, double dy, double r) {
    const double edge = 1.0;
    auto soft = [edge](double signed_dist) { // <0 inside
        return std::min(1.0, std::max(0.0, -signed_dist / edge + 0.5));
    };
    switch (kind) {
        case 0: // circle
            return soft(std::sqrt(dx * dx + dy * dy) - r);
        case 1: { // square
            const double d = std::max(std::abs(dx), std::abs(dy)) - r * 0.82;
            return soft(d);
        }
        case 2: { // triangle (apex up)
            const double y = dy + r * 0.55;
            const double half_width = (y / (1.6 * r)) * r * 1.05;
            if (y < 0.0 || y > 1.6 * r) return 0.0;
            return soft(std::abs(dx) - half_width);
        }
        case 3: { // cross
            const double bar = r * 0.32;
            const double d1 = std::max(std::abs(dx) - bar, std::abs(dy) - r);
            const double d2 = std::max(std::abs(dy) - bar, std::abs(dx) - r);
            return soft(std::min(d1, d2));
        }
        case 4: // diamond
            return soft((std::abs(dx) + std::abs(dy)) - r);
        case 5: { // ring
            const double d = std::sqrt(dx * dx + dy * dy);
            return soft(std::max(d - r, (r * 0.55) - d));
        }
        default:
            return 0.0;
    }
}

} // namespace detail

// Deterministic labeled-shapes generator: class = geometry, while colour,
// position, size and background noise vary per sample.
inline Dataset generate_synthetic(const ShapeGenConfig& cfg) {
    if (cfg.num_classes < 1 || cfg.num_classes > detail::kShapeKinds)
        throw DatasetError("generate_synthetic: num_classes must be in [1, " +
                           std::to_string(detail::kShapeKinds) + "]");
    if (cfg.channels != 1 && cfg.channels != 3)
        throw DatasetError("generate_synthetic: channels must be 1 or 3");
    if (cfg.samples_per_class < 1 || cfg.image_size < 8)
        throw DatasetError("generate_synthetic: invalid sample count or image size");

    const int s = cfg.image_size;
    const std::int64_t n = static_cast<std::int64_t>(cfg.num_classes) * cfg.samples_per_class;
    Dataset ds;
    ds.images = Tensor<std::uint8_t>({n, cfg.channels, s, s});
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.num_classes = cfg.num_classes;

    Rng rng(cfg.seed);
    std::vector<double> canvas(static_cast<std::size_t>(cfg.channels) * s * s);
    for (std::int64_t i = 0; i < n; ++i) {
        const int kind = static_cast<int>(i % cfg.num_classes);
        ds.labels[static_cast<std::size_t>(i)] = kind;

        // Low contrast keeps the class signal within a few multiples of the
        // attack budgets used in the experiments.
        const double bg = rng.uniform(0.25, 0.50);
        const double contrast = rng.uniform(0.14, 0.34) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        std::array<double, 3> fg{};
        for (int c = 0; c < cfg.channels; ++c)
            fg[static_cast<std::size_t>(c)] = bg + contrast * rng.uniform(0.75, 1.25);
        const double cx = (s - 1) / 2.0 + rng.uniform(-0.12, 0.12) * s;
        const double cy = (s - 1) / 2.0 + rng.uniform(-0.12, 0.12) * s;
        const double r = rng.uniform(0.22, 0.36) * s;

        for (int c = 0; c < cfg.channels; ++c)
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x) {
                    const double cov = detail::shape_coverage(kind, x - cx, y - cy, r);
                    double v = bg + (fg[static_cast<std::size_t>(c)] - bg) * cov;
                    v += rng.normal(0.0, cfg.noise_std);
                    canvas[(static_cast<std::size_t>(c) * s + y) * s + x] = std::min(1.0, std::max(0.0, v));
                }
        for (std::size_t j = 0; j < canvas.size(); ++j)
            ds.images.data[static_cast<std::size_t>(i) * canvas.size() + j] =
                static_cast<std::uint8_t>(std::lround(canvas[j] * 255.0));
    }

    ds.meta = {{"name", "shapes" + std::to_string(cfg.num_classes)},
               {"generator", cfg.to_json()},
               {"seed", cfg.seed}};
    ds.validate();
    return ds;
}

inline Tensor<float> to_float(const Tensor<std::uint8_t>& images) {
    Tensor<float> out;
    out.shape = images.shape;
    out.data.resize(images.data.size());
    for (std::size_t i = 0; i < images.data.size(); ++i)
        out.data[i] = static_cast<float>(images.data[i]) / 255.0f;
    return out;
}

inline Tensor<std::uint8_t> to_bytes(const Tensor<float>& images) {
    Tensor<std::uint8_t> out;
    out.shape = images.shape;
    out.data.resize(images.data.size());
    for (std::size_t i = 0; i < images.data.size(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, images.data[i]));
        out.data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return out;
}

inline Dataset subset(const Dataset& ds, const std::vector<std::int64_t>& indices) {
    const std::int64_t chw = ds.channels() * ds.height() * ds.width();
    Dataset out;
    out.images = Tensor<std::uint8_t>({static_cast<std::int64_t>(indices.size()), ds.channels(), ds.height(), ds.width()});
    out.labels.resize(indices.size());
    out.num_classes = ds.num_classes;
    out.meta = ds.meta;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::int64_t src = indices[i];
        std::copy_n(ds.images.ptr() + src * chw, chw, out.images.ptr() + static_cast<std::int64_t>(i) * chw);
        out.labels[i] = ds.labels[static_cast<std::size_t>(src)];
    }
    return out;
}

inline Dataset take(const Dataset& ds, std::int64_t n) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < std::min(n, ds.size()); ++i) idx.push_back(i);
    return subset(ds, idx);
}

// Disjoint (train, val, test) partition covering every index.
inline std::array<Dataset, 3> split(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
    double sum = 0.0;
    for (double f : fractions) {
        if (f <= 0.0) throw DatasetError("split: fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw DatasetError("split: fractions must sum to 1 (got " + std::to_string(sum) + ")");

    std::vector<std::int64_t> idx(static_cast<std::size_t>(ds.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
    Rng rng(seed);
    rng.shuffle(idx);

    const std::int64_t n = ds.size();
    const std::int64_t n0 = std::llround(fractions[0] * static_cast<double>(n));
    const std::int64_t n1 = std::llround((fractions[0] + fractions[1]) * static_cast<double>(n)) - n0;
    std::array<Dataset, 3> out;
    out[0] = subset(ds, {idx.begin(), idx.begin() + n0});
    out[1] = subset(ds, {idx.begin() + n0, idx.begin() + n0 + n1});
    out[2] = subset(ds, {idx.begin() + n0 + n1, idx.end()});
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: directory with meta.json sidecar + data.bin payload
// (all image bytes, then all labels as little-endian int32).
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    ds.validate();
    fs::create_directories(dir);

    std::vector<char> payload;
    payload.reserve(ds.images.data.size() + ds.labels.size() * 4);
    payload.insert(payload.end(), ds.images.data.begin(), ds.images.data.end());
    for (int l : ds.labels) {
        const auto v = static_cast<std::int32_t>(l);
        const char* p = reinterpret_cast<const char*>(&v);
        payload.insert(payload.end(), p, p + 4);
    }

    nlohmann::json meta = ds.meta;
    meta["n"] = ds.size();
    meta["channels"] = ds.channels();
    meta["height"] = ds.height();
    meta["width"] = ds.width();
    meta["num_classes"] = ds.num_classes;
    meta["checksum_crc32"] = crc32(payload.data(), payload.size());
    meta["format_version"] = 1;

    {
        std::ofstream os(dir / "data.bin.tmp", std::ios::binary);
        os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!os) throw DatasetError("save_dataset: write failed in " + dir.string());
    }
    fs::rename(dir / "data.bin.tmp", dir / "data.bin");
    {
        std::ofstream os(dir / "meta.json.tmp");
        os << meta.dump(2) << "\n";
        if (!os) throw DatasetError("save_dataset: meta write failed in " + dir.string());
    }
    fs::rename(dir / "meta.json.tmp", dir / "meta.json");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream ms(dir / "meta.json");
    if (!ms) throw CorruptPayloadError("load_dataset: missing meta.json in " + dir.string());
    nlohmann::json meta = nlohmann::json::parse(ms, nullptr, false);
    if (meta.is_discarded()) throw CorruptPayloadError("load_dataset: corrupt meta.json in " + dir.string());
    for (const char* key : {"n", "channels", "height", "width", "num_classes", "checksum_crc32"})
        if (!meta.contains(key)) throw CorruptPayloadError(std::string("load_dataset: meta.json missing '") + key + "'");

    const std::int64_t n = meta["n"], c = meta["channels"], h = meta["height"], w = meta["width"];
    const std::int64_t record = c * h * w + 4;
    const std::int64_t expected = n * record;

    std::ifstream is(dir / "data.bin", std::ios::binary);
    if (!is) throw CorruptPayloadError("load_dataset: missing data.bin in " + dir.string());
    std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (static_cast<std::int64_t>(payload.size()) != expected) {
        if (payload.size() % static_cast<std::size_t>(record) == 0)
            throw ShapeMismatchError("load_dataset: header declares " + std::to_string(n) + " records, payload holds " +
                                     std::to_string(payload.size() / static_cast<std::size_t>(record)));
        throw CorruptPayloadError("load_dataset: truncated payload (" + std::to_string(payload.size()) + " bytes, expected " +
                                  std::to_string(expected) + ")");
    }
    if (crc32(payload.data(), payload.size()) != meta["checksum_crc32"].get<std::uint32_t>())
        throw CorruptPayloadError("load_dataset: checksum mismatch in " + dir.string());

    Dataset ds;
    ds.images = Tensor<std::uint8_t>({n, c, h, w});
    std::copy_n(payload.begin(), n * c * h * w, reinterpret_cast<char*>(ds.images.data.data()));
    ds.labels.resize(static_cast<std::size_t>(n));
    const char* lp = payload.data() + n * c * h * w;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int32_t v;
        std::memcpy(&v, lp + i * 4, 4);
        ds.labels[static_cast<std::size_t>(i)] = v;
    }
    ds.num_classes = meta["num_classes"];
    ds.meta = meta;
    ds.validate();
    return ds;
}

} // namespace caf
