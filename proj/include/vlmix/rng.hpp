#pragma once

// Seeded randomness with library-independent sampling so that results match
// across standard library implementations.

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace vlmix {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, index); used so per-example randomness does
// not depend on call order.
inline Rng stream_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t salt = 0) {
  return Rng(splitmix64(splitmix64(seed ^ (salt * 0xD1B54A32D192ED03ULL)) + index));
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

// Uniform integer in [0, n) by rejection.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = Rng::max() - (Rng::max() % n);
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

inline double standard_normal(Rng& rng) {
  double u1;
  do {
    u1 = uniform01(rng);
  } while (u1 <= 0.0);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Normal(0, std) resampled until within two standard deviations.
inline double truncated_normal(Rng& rng, double std) {
  double z;
  do {
    z = standard_normal(rng);
  } while (std::abs(z) > 2.0);
  return z * std;
}

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void set_rng_state(Rng& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
}

}  // namespace vlmix
