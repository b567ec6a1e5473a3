#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace quadprior {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Child seed for item `index` under `parent`. Used for per-draw and per-job
/// seeds so any parallel schedule reproduces the sequential result.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) noexcept {
    return splitmix64(splitmix64(parent) ^ (index * 0xd1b54a32d192ed03ULL + 1));
}

/// Child seed for a named stage. FNV-1a of the label, then mixed.
constexpr std::uint64_t derive_seed(std::uint64_t parent, std::string_view label) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return splitmix64(parent ^ splitmix64(h));
}

}  // namespace quadprior
