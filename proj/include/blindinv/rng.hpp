#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace blindinv {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// PCG32 (XSH-RR) seeded from a single 64-bit value through splitmix64.
/// Streams are identical on every platform; all draws consume a fixed number
/// of 32-bit outputs so sequences can be reproduced elsewhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept { reseed(seed); }

  void reseed(std::uint64_t seed) noexcept {
    const std::uint64_t init_state = splitmix64(seed);
    const std::uint64_t init_seq = splitmix64(init_state);
    state_ = 0;
    inc_ = (init_seq << 1u) | 1u;
    next_u32();
    state_ += init_state;
    next_u32();
  }

  std::uint32_t next_u32() noexcept {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t hi = next_u32();
    return (hi << 32u) | next_u32();
  }

  /// Uniform in the open interval (0, 1); 53 bits, two 32-bit draws.
  double uniform01() noexcept {
    const std::uint64_t bits = next_u64() >> 11u;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  /// Box-Muller, cosine branch only: exactly four 32-bit draws per sample.
  double normal(double mean = 0.0, double stddev = 1.0) noexcept {
    const double u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, bound) by rejection; bound must be positive.
  std::uint32_t bounded(std::uint32_t bound) noexcept {
    const std::uint32_t threshold = (0u - bound) % bound;
    for (;;) {
      const std::uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  std::uint64_t state() const noexcept { return state_; }
  std::uint64_t increment() const noexcept { return inc_; }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 1;
};

/// Seed for the i-th independent trial derived from a base seed.
inline constexpr std::uint64_t trial_seed(std::uint64_t seed, std::uint64_t index) noexcept {
  return splitmix64(seed + index);
}

}  // namespace blindinv
