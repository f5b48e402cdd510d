#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caf/hash.hpp"
#include "caf/tensor.hpp"

namespace caf {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

// On-disk archive: magic, format version, JSON metadata (architecture
// descriptor, config echo, provenance), then named float32 tensors as
// (name, dtype, shape, row-major little-endian data).
struct TensorArchive {
    json meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    static constexpr char kMagic[9] = "CAFTNSR1";
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::uint8_t kDtypeF32 = 0;

    const Tensor<float>& find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    }
};

namespace detail {
template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
} // namespace detail

inline void save_archive(const TensorArchive& a, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
        os.write(TensorArchive::kMagic, 8);
        detail::write_pod(os, TensorArchive::kVersion);
        const std::string meta = a.meta.dump();
        detail::write_pod(os, static_cast<std::uint64_t>(meta.size()));
        os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
        detail::write_pod(os, static_cast<std::uint32_t>(a.tensors.size()));
        for (const auto& [name, t] : a.tensors) {
            detail::write_pod(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod(os, TensorArchive::kDtypeF32);
            detail::write_pod(os, static_cast<std::uint8_t>(t.shape.size()));
            for (auto d : t.shape) detail::write_pod(os, static_cast<std::int64_t>(d));
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        }
        if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(TensorArchive::kMagic, 8))
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != TensorArchive::kVersion)
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version) + " in " +
                                 path.string());
    const auto meta_len = detail::read_pod<std::uint64_t>(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw std::runtime_error("checkpoint: truncated metadata in " + path.string());

    TensorArchive a;
    a.meta = json::parse(meta, nullptr, false);
    if (a.meta.is_discarded()) throw std::runtime_error("checkpoint: corrupt metadata in " + path.string());

    const auto count = detail::read_pod<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        const auto dtype = detail::read_pod<std::uint8_t>(is);
        if (dtype != TensorArchive::kDtypeF32)
            throw std::runtime_error("checkpoint: unsupported dtype in " + path.string());
        const auto ndim = detail::read_pod<std::uint8_t>(is);
        Shape shape(ndim);
        for (auto& d : shape) d = detail::read_pod<std::int64_t>(is);
        Tensor<float> t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint: truncated tensor data in " + path.string());
        a.tensors.emplace_back(std::move(name), std::move(t));
    }
    return a;
}

// CRC over all tensor payloads in order; used as a provenance fingerprint.
inline std::uint32_t archive_checksum(const TensorArchive& a) {
    std::uint32_t crc = 0;
    for (const auto& [name, t] : a.tensors) {
        crc = crc32(name.data(), name.size(), crc);
        crc = crc32(t.data.data(), t.data.size() * sizeof(float), crc);
    }
    return crc;
}

} // namespace caf
