#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace treeloss {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL)
{
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Independent generator for a named substream of a top-level seed. The same
// (seed, name, index) always yields the same sequence, regardless of which
// thread asks for it.
inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0)
{
    const std::uint64_t h = fnv1a64(name);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

} // namespace treeloss
