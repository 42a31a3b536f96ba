#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>

#include "moelab/tensor.hpp"

namespace moelab {

// 64-bit FNV-1a.
class Fnv1a {
public:
    void update(const void* bytes, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t checksum(std::span<const double> values) {
    Fnv1a h;
    h.update(values.data(), values.size_bytes());
    return h.digest();
}

inline std::uint64_t checksum(const Tensor& t) { return checksum(t.data()); }

}  // namespace moelab
