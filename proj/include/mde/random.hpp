#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace mde {

/// splitmix64 mixing step; used to derive independent seeds from a base seed
/// plus stream identifiers so that sub-streams are stable across runs.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(a) ^ b);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b) ^ c);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(mix_seed(seed)); }

template <typename T>
void fill_normal(Rng& rng, std::span<T> out, T mean = T(0), T stddev = T(1)) {
  std::normal_distribution<double> dist{double(mean), double(stddev)};
  for (auto& v : out) v = T(dist(rng));
}

template <typename T>
void fill_uniform(Rng& rng, std::span<T> out, T lo, T hi) {
  std::uniform_real_distribution<double> dist{double(lo), double(hi)};
  for (auto& v : out) v = T(dist(rng));
}

/// Deterministic Fisher-Yates shuffle (not std::shuffle, whose draw pattern
/// is implementation-defined).
template <typename T>
void shuffle(Rng& rng, std::span<T> items) {
  if (items.size() < 2) return;
  for (std::size_t i = items.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> dist(0, i);
    std::swap(items[i], items[dist(rng)]);
  }
}

}  // namespace mde
