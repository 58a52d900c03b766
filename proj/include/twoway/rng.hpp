#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace twoway {

// splitmix64 finalizer; bijective on uint64.
inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// Derives a child seed from a master seed and up to three stream ids.
// Every (episode, direction, purpose) tuple gets its own engine so that
// parallel evaluation cannot alias streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t h = mix64(master + 0x9e3779b97f4a7c15ULL);
  h = mix64(h ^ (a + 0x9e3779b97f4a7c15ULL));
  h = mix64(h ^ (b + 0x3c6ef372fe94f82aULL));
  h = mix64(h ^ (c + 0x78dde6e5fd29f05bULL));
  return h;
}

inline std::mt19937_64 substream(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  return std::mt19937_64(derive_seed(master, a, b, c));
}

// One N(0, sigma_sq) draw. sigma_sq == 0 yields exactly 0.
inline double gaussian(std::mt19937_64& eng, double sigma_sq) {
  if (sigma_sq == 0.0) return 0.0;
  std::normal_distribution<double> dist(0.0, std::sqrt(sigma_sq));
  return dist(eng);
}

inline void fill_gaussian(std::mt19937_64& eng, double sigma_sq,
                          std::span<double> out) {
  if (sigma_sq == 0.0) {
    for (auto& v : out) v = 0.0;
    return;
  }
  std::normal_distribution<double> dist(0.0, std::sqrt(sigma_sq));
  for (auto& v : out) v = dist(eng);
}

}  // namespace twoway
