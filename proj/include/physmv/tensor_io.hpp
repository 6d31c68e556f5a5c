#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "physmv/common.hpp"
#include "physmv/tensor.hpp"

namespace physmv {

// PMV1 binary tensor format:
//   4-byte magic "PMV1"
//   u8 rank
//   rank x u32 little-endian extents
//   u8 dtype code (0 = f32, 1 = f64)
//   raw row-major payload

namespace detail {

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename T>
inline void write_raw_le(std::ostream& os, const T* data, std::size_t count) {
    // Little-endian host assumed; extents and payload share the convention.
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

}  // namespace detail

template <typename Real>
void save_pmv(const Tensor<Real>& t, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os.write("PMV1", 4);
    const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (std::size_t e : t.shape()) detail::write_u32_le(os, static_cast<std::uint32_t>(e));
    const std::uint8_t dtype = sizeof(Real) == 4 ? 0 : 1;
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    detail::write_raw_le(os, t.values().data(), t.numel());
    if (!os) throw IoError("write failed: " + path.string());
}

/// Loads a PMV1 tensor, converting the payload to Real if the stored dtype
/// differs.
template <typename Real>
Tensor<Real> load_pmv(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "PMV1", 4) != 0)
        throw IoError("bad PMV1 magic in " + path.string());
    std::uint8_t rank = 0;
    is.read(reinterpret_cast<char*>(&rank), 1);
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_u32_le(is);
    std::uint8_t dtype = 0;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    if (!is || dtype > 1) throw IoError("bad PMV1 header in " + path.string());
    const std::size_t n = shape_numel(shape);
    std::vector<Real> values(n);
    if ((dtype == 0) == (sizeof(Real) == 4)) {
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(n * sizeof(Real)));
    } else if (dtype == 0) {
        std::vector<float> tmp(n);
        is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 4));
        for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<Real>(tmp[i]);
    } else {
        std::vector<double> tmp(n);
        is.read(reinterpret_cast<char*>(tmp.data()), static_cast<std::streamsize>(n * 8));
        for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<Real>(tmp[i]);
    }
    if (!is) throw IoError("truncated PMV1 payload in " + path.string());
    return Tensor<Real>(std::move(shape), std::move(values));
}

}  // namespace physmv
