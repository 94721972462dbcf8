#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace transynth {

using RngEngine = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Independent substream for (seed, stream). Parallel code derives one engine
/// per work item, so results never depend on thread scheduling.
inline RngEngine make_stream(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0x9e3779b97f4a7c15ULL * (stream + 0x51ed2701));
  const std::uint64_t a = splitmix64(s);
  const std::uint64_t b = splitmix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return RngEngine(seq);
}

/// Uniform on [0, 1) with 53-bit resolution.
inline double uniform01(RngEngine& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

/// Uniform on (0, 1); safe operand for log() in inverse-CDF transforms.
inline double uniform_open01(RngEngine& g) {
  double u;
  do {
    u = uniform01(g);
  } while (u <= 0.0);
  return u;
}

inline double uniform_range(RngEngine& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

/// Standard normal via Box-Muller. Stateless: a draw depends only on the
/// engine position, which keeps substreamed parallel runs reproducible.
inline double normal01(RngEngine& g) {
  const double u1 = uniform_open01(g);
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
}

inline int bernoulli(RngEngine& g, double p) { return uniform01(g) < p ? 1 : 0; }

/// Index draw for resampling. n is far below 2^64, so modulo bias is nil.
inline std::int64_t uniform_index(RngEngine& g, std::int64_t n) {
  return static_cast<std::int64_t>(g() % static_cast<std::uint64_t>(n));
}

}  // namespace transynth
