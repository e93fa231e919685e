#pragma once

// Seeded random streams. Every stochastic step in the simulator draws from
// an Rng seeded by derive_seed(...), so results depend only on the root seed
// and the (round, client, purpose) coordinates, never on thread scheduling.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <utility>

namespace bsosl {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds coordinates into a root seed: h = splitmix64(h ^ splitmix64(c)) per
/// coordinate, starting from h = splitmix64(seed).
constexpr std::uint64_t derive_seed(std::uint64_t seed,
                                    std::initializer_list<std::uint64_t> coords) noexcept {
  std::uint64_t h = splitmix64(seed);
  for (auto c : coords) h = splitmix64(h ^ splitmix64(c));
  return h;
}

/// Purpose tags used as the first coordinate of derived seeds.
namespace stream {
inline constexpr std::uint64_t kData = 0x44415441;      // "DATA"
inline constexpr std::uint64_t kShift = 0x53484654;     // "SHFT"
inline constexpr std::uint64_t kSplit = 0x53504c54;     // "SPLT"
inline constexpr std::uint64_t kInit = 0x494e4954;      // "INIT"
inline constexpr std::uint64_t kTrain = 0x5452414e;     // "TRAN"
inline constexpr std::uint64_t kCluster = 0x434c5553;   // "CLUS"
inline constexpr std::uint64_t kBsa = 0x42534121;       // "BSA!"
inline constexpr std::uint64_t kCentral = 0x43454e54;   // "CENT"
inline constexpr std::uint64_t kPartition = 0x50415254; // "PART"
}  // namespace stream

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Unbiased uniform integer in [0, n). n must be positive.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

/// Fisher-Yates shuffle using uniform_index, so the permutation is fixed by
/// the generator state alone.
template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[uniform_index(rng, i)]);
  }
}

}  // namespace bsosl
