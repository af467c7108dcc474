// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mapvae::rng {

// mt19937_64 has a standard-mandated output sequence, so seeded streams are
// reproducible across builds. All distribution sampling below is hand-rolled
// because the stdlib distribution objects are implementation-defined.
using Engine = std::mt19937_64;

inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t combine(std::uint64_t a, std::uint64_t b) {
  return mix(a ^ (mix(b) + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2)));
}

inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Derive an independent stream seed from a base seed and stream tags.
inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t tag0,
                                 std::uint64_t tag1 = 0) {
  return combine(combine(base, tag0), tag1);
}

// Uniform double in [0, 1).
inline double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(Engine& eng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(eng);
}

// Uniform integer in [0, n). n must be >= 1.
inline std::uint64_t below(Engine& eng, std::uint64_t n) {
  // Rejection sampling keeps the draw unbiased and deterministic.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = eng();
  } while (x >= limit);
  return x % n;
}

// Standard normal via Box-Muller. Draws two uniforms per call.
inline double normal(Engine& eng) {
  double u1 = uniform01(eng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double u2 = uniform01(eng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

template <typename T>
void shuffle(std::vector<T>& v, Engine& eng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(below(eng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace mapvae::rng
