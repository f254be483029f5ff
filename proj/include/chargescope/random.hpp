#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace chargescope {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; decorrelates nearby seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Child seed number `index` of `base`. Used to hand out per-item seeds
/// before any fan-out so results never depend on scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    return mix64(mix64(base) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t hash_name(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return mix64(h);
}

}  // namespace chargescope
