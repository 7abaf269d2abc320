#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace hfl {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Named seed stream: the same (seed, parts...) always yields the same child
// seed, independent of the order in which streams are requested.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = splitmix64(seed);
    for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

// Stream tags for derive_seed.
namespace stream {
inline constexpr std::uint64_t kSynth = 0x53594e54;
inline constexpr std::uint64_t kSplit = 0x53504c54;
inline constexpr std::uint64_t kPartition = 0x50415254;
inline constexpr std::uint64_t kBackbone = 0x42414342;
inline constexpr std::uint64_t kHead = 0x48454144;
inline constexpr std::uint64_t kSample = 0x53414d50;
inline constexpr std::uint64_t kAdapter = 0x4c4f5241;
inline constexpr std::uint64_t kShuffle = 0x53485546;
}  // namespace stream

}  // namespace hfl
