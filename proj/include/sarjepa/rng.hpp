#pragma once

#include <cstdint>
#include <random>

namespace sarjepa {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Used to derive independent streams from one seed.
std::uint64_t mix64(std::uint64_t x);

/// Seed for item `index` of stream `stream` under a global seed. Results do
/// not depend on the order in which items are visited.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0);

inline Rng make_rng(std::uint64_t seed) { return Rng(mix64(seed)); }

/// Stream tags so that different consumers of one item seed never collide.
namespace stream {
inline constexpr std::uint64_t scene = 1;
inline constexpr std::uint64_t speckle = 2;
inline constexpr std::uint64_t augment = 3;
inline constexpr std::uint64_t windows = 4;
inline constexpr std::uint64_t mask = 5;
inline constexpr std::uint64_t init = 6;
inline constexpr std::uint64_t shuffle = 7;
inline constexpr std::uint64_t split = 8;
inline constexpr std::uint64_t probe = 9;
}  // namespace stream

}  // namespace sarjepa
