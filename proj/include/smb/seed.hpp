#pragma once

#include <cstdint>
#include <initializer_list>

namespace smb {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Order-sensitive combination of a seed with stream identifiers.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t p : parts) {
        h = splitmix64(h ^ splitmix64(p));
    }
    return h;
}

} // namespace smb
