#pragma once

// Checkpoint archive: magic + version, a JSON metadata record, then one
// entry per parameter mapping its dotted name to a little-endian float64
// array with an explicit shape header. Values are widened to float64 on
// write and narrowed back on read, which is exact for float-trained runs.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "indigo/params.hpp"

namespace indigo {

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) {
    const std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace detail

inline constexpr char kCheckpointMagic[8] = {'I', 'N', 'D', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(std::ostream& os, const ParamStore<T>& store, const nlohmann::json& meta) {
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, kCheckpointVersion);
    const std::string meta_str = meta.dump();
    detail::put_u64(os, meta_str.size());
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(store.size()));
    for (int i = 0; i < store.size(); ++i) {
        const std::string& name = store.name(i);
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Tensor<T>& v = store.value(i);
        detail::put_u32(os, static_cast<std::uint32_t>(v.shape.size()));
        for (int d : v.shape) detail::put_u64(os, static_cast<std::uint64_t>(d));
        for (long k = 0; k < v.numel(); ++k) detail::put_f64(os, static_cast<double>(v.data[k]));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed");
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store,
                     const nlohmann::json& meta) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    save_checkpoint(f, store, meta);
}

template <typename T>
std::string checkpoint_bytes(const ParamStore<T>& store, const nlohmann::json& meta) {
    std::ostringstream os(std::ios::binary);
    save_checkpoint(os, store, meta);
    return os.str();
}

/// Loads entries into matching names of an existing store. With
/// `subset_ok`, archive entries missing from the store are an error but the
/// store may hold parameters the archive lacks (used to merge a pretrained
/// bundle into a larger run store).
template <typename T>
nlohmann::json load_checkpoint(std::istream& is, ParamStore<T>& store, bool subset_ok = false) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t meta_len = detail::get_u64(is);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    const std::uint32_t n = detail::get_u32(is);
    std::size_t loaded = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t ndim = detail::get_u32(is);
        std::vector<int> shape(ndim);
        long numel = 1;
        for (auto& d : shape) {
            d = static_cast<int>(detail::get_u64(is));
            numel *= d;
        }
        const int pid = store.find(name);
        if (pid < 0) throw std::runtime_error("checkpoint: archive entry '" + name +
                                              "' has no matching parameter");
        Tensor<T>& dst = store.value(pid);
        if (dst.shape != shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': store " +
                                     shape_string(dst.shape) + " vs archive " + shape_string(shape));
        for (long k = 0; k < numel; ++k) dst.data[k] = static_cast<T>(detail::get_f64(is));
        ++loaded;
    }
    if (!is) throw std::runtime_error("checkpoint: truncated archive");
    if (!subset_ok && loaded != static_cast<std::size_t>(store.size()))
        throw std::runtime_error("checkpoint: archive does not cover the full parameter set");
    return nlohmann::json::parse(meta_str);
}

template <typename T>
nlohmann::json load_checkpoint(const std::string& path, ParamStore<T>& store,
                               bool subset_ok = false) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    return load_checkpoint(f, store, subset_ok);
}

} // namespace indigo
