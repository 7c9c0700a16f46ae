#pragma once

// Versioned binary container of named tensors:
//   "DTDN" | u32 version | u32 count |
//   count x ( u32 name_len | name | u32 rank | rank x u64 dim | doubles )
// All integers and doubles are little-endian.

#include <bit>
#include <type_traits>
#include <utility>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtdn/tensor.hpp"

namespace dtdn {

inline constexpr char kCheckpointMagic[4] = {'D', 'T', 'D', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw CheckpointError("checkpoint truncated");
    if constexpr (std::endian::native == std::endian::big)
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint: " + path);
    os.write(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(os, kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        if (numel(a.shape) != a.values.size()) throw CheckpointError("checkpoint entry shape mismatch: " + a.name);
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) detail::put_le<std::uint64_t>(os, d);
        for (double v : a.values) detail::put_le<double>(os, v);
    }
    if (!os) throw CheckpointError("failed writing checkpoint: " + path);
}

/// Entries keyed by name.
inline std::map<std::string, NamedArray> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw CheckpointError("not a checkpoint (bad magic): " + path);
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(is);
    std::map<std::string, NamedArray> out;
    for (std::uint32_t e = 0; e < count; ++e) {
        NamedArray a;
        const auto len = detail::get_le<std::uint32_t>(is);
        a.name.resize(len);
        if (!is.read(a.name.data(), len)) throw CheckpointError("checkpoint truncated");
        const auto rank = detail::get_le<std::uint32_t>(is);
        for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(detail::get_le<std::uint64_t>(is));
        a.values.resize(numel(a.shape));
        for (auto& v : a.values) v = detail::get_le<double>(is);
        out.emplace(a.name, std::move(a));
    }
    return out;
}

}  // namespace dtdn
