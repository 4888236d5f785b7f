#pragma once

#include <cstdint>
#include <random>
#include <vector>

// Deterministic randomness helpers. std::mt19937_64 has a fully specified
// output sequence, but the standard distributions do not, so everything
// that must reproduce bit-identically across compilers goes through the
// explicit conversions below.

namespace kdrift {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a tag.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) {
  return splitmix64(base + 0x9e3779b97f4a7c15ULL * (tag + 1));
}

/// Uniform double in [0, 1) using the top 53 bits of the engine output.
inline double uniform_unit(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo, hi).
inline double uniform_range(std::mt19937_64& gen, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(gen);
}

/// Uniform integer in [0, n). Rejection sampling keeps it unbiased and
/// the result depends only on the engine sequence.
inline std::uint64_t uniform_below(std::mt19937_64& gen, std::uint64_t n) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = gen();
  } while (x >= limit);
  return x % n;
}

/// Fisher-Yates shuffle driven by uniform_below.
template <typename T>
void shuffle_portable(std::vector<T>& v, std::mt19937_64& gen) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(gen, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace kdrift
