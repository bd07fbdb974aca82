#pragma once

// Deterministic RNG streams keyed by (seed, tags...), independent of the
// order in which streams are created.

#include <cstdint>
#include <initializer_list>
#include <random>

namespace ssip {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = splitmix64(seed);
    for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    return std::mt19937_64(derive_seed(seed, tags));
}

// Stream tags.
enum StreamTag : std::uint64_t {
    kTagWorld = 1,
    kTagSampler = 2,
    kTagEnsemble = 3,
    kTagDemos = 4,
    kTagCritic = 5,
    kTagOracle = 6,
};

}  // namespace ssip
