#pragma once

// Portable deterministic randomness: every stream here produces the same bits
// on every platform and standard library.

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace hat::detail {

/// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline double unit_double(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

class UniformSource {
 public:
  explicit UniformSource(std::uint64_t seed) : engine_(seed) {}

  /// [0, 1)
  double next() { return unit_double(engine_()); }
  /// [0, n)
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(next() * static_cast<double>(n)); }
  /// Standard normal via Box-Muller.
  double normal() {
    const double u1 = 1.0 - next();
    const double u2 = next();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace hat::detail
