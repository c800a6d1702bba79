#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/optim.hpp"
#include "cagan/tensor.hpp"

namespace cagan {

// Checkpoint container: magic "CAGN", format version u32, u64 entry count,
// then per entry: u32 name length, UTF-8 name, u32 rank, u64 dims, raw f64
// data. All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write("CAGN", 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint64_t>(os, tensors.entries().size());
    for (const auto& [name, t] : tensors.entries()) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d = 0; d < t.rank(); ++d)
            detail::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(t.dim(d)));
        for (std::size_t i = 0; i < t.size(); ++i) detail::write_le<double>(os, t.at(i));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CAGN", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::read_le<std::uint64_t>(is);
    NamedTensors out;
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = detail::read_le<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rank = detail::read_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
        std::vector<double> data(numel(shape));
        for (double& v : data) v = detail::read_le<double>(is);
        if (!is) throw std::runtime_error("checkpoint: truncated entry in " + path);
        out.add(name, Tensor::from_vector(std::move(shape), std::move(data)));
    }
    return out;
}

// Copies values from a loaded checkpoint into live (grad-tracked) tensors.
inline void assign_from_checkpoint(NamedTensors& live, const NamedTensors& loaded) {
    for (auto& [name, t] : live.entries()) {
        bool found = false;
        for (const auto& [lname, lt] : loaded.entries()) {
            if (lname != name) continue;
            if (lt.shape() != t.shape())
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            t.mutable_values() = lt.values();
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint: missing tensor " + name);
    }
}

// FNV-1a over raw little-endian bytes; used for parameter and file digests.
inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t hash_tensors(const NamedTensors& tensors) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : tensors.entries()) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(t.data(), t.size() * sizeof(double), h);
    }
    return h;
}

inline std::uint64_t hash_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("hash_file: cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        h = fnv1a(buf, static_cast<std::size_t>(is.gcount()), h);
        if (!is) break;
    }
    return h;
}

}  // namespace cagan
