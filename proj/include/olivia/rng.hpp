#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace olivia {

/// Deterministic counter-based 64-bit generator. Output i of the stream
/// (seed, tag) is mix(key + (i+1)*GAMMA) with key = mix(seed ^ fnv1a(tag))
/// and mix the SplitMix64 finalizer. Streams with distinct tags are
/// independent, so data generation, shuffles, and parameter init can each
/// be reproduced in isolation. Gaussians come from Box-Muller applied to
/// (1 - u1, u2).
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  CounterRng(std::uint64_t seed, std::string_view tag)
      : key_(mix(seed ^ fnv1a(tag))) {}

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [0, n); n > 0. Plain modulo: bias is negligible for the
  /// desk-scale ranges used here and the reduction stays trivially
  /// reproducible in oracle reimplementations.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace olivia
