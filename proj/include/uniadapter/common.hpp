#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace uniadapter {

// Error taxonomy. Every contract violation maps to one of these so callers
// (and tests) can distinguish a bad shape from a bad config or a bad file.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IOError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

// When enabled, every tensor op scans its output for NaN/Inf and throws
// NumericsError. Off by default to keep hot loops branch-light.
inline bool& debug_numeric_checks() {
    static bool enabled = false;
    return enabled;
}

// Deterministic RNG used for all weight init and data synthesis.
using Rng = std::mt19937_64;

// FNV-1a, used for config/spec/checkpoint fingerprints.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Little-endian scalar IO. Checkpoint and dataset formats are fixed LE
// regardless of host byte order.
namespace le {

template <typename T>
void put(std::string& buf, T v) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    put<std::uint32_t>(buf, u);
}

struct Reader {
    const unsigned char* p;
    std::size_t n;
    std::size_t pos = 0;

    Reader(const void* data, std::size_t len) : p(static_cast<const unsigned char*>(data)), n(len) {}

    void need(std::size_t k) const {
        if (pos + k > n) throw IOError("unexpected end of data at offset " + std::to_string(pos));
    }

    template <typename T>
    T get() {
        static_assert(std::is_integral_v<T>);
        need(sizeof(T));
        using U = std::make_unsigned_t<T>;
        U u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(p[pos + i]) << (8 * i);
        pos += sizeof(T);
        return static_cast<T>(u);
    }

    float get_f32() {
        std::uint32_t u = get<std::uint32_t>();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }

    std::string get_bytes(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p + pos), k);
        pos += k;
        return s;
    }

    bool done() const { return pos == n; }
};

}  // namespace le

}  // namespace uniadapter
