#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

#include "llip/core/errors.hpp"

namespace llip {

// Mixes a base seed with a textual label so that every consumer of
// randomness (data generation, parameter init, batch sampling, ...) gets an
// independent, reproducible stream from one top-level seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  // splitmix64 finalizer over the combined value
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic RNG wrapper. mt19937_64 plus hand-rolled mappings so the
// produced values are identical on every platform (the std distributions
// are implementation-defined and must not be used here).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw value_error("Rng::uniform_int: n must be positive");
    // rejection to avoid modulo bias
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = eng_();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller (cosine branch only).
  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, std) resampled until |x| <= 2*std.
  double truncated_normal(double stddev) {
    double z;
    do {
      z = normal() * stddev;
    } while (std::abs(z) > 2.0 * stddev);
    return z;
  }

  // Fisher-Yates permutation of 0..n-1.
  std::vector<long> permutation(long n) {
    std::vector<long> p(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    for (long i = n - 1; i > 0; --i) {
      const long j = static_cast<long>(uniform_int(static_cast<std::uint64_t>(i) + 1));
      std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace llip
