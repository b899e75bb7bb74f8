#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace bnn {

/// Deterministic pseudorandom generator (xoshiro256**, seeded via splitmix64).
/// The same seed produces the same sequence on every platform and run; all
/// randomness in the framework flows through explicitly passed Rng values.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // splitmix64 expansion of the seed into the four state words
    uint64_t x = seed;
    for (auto& w : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0,1) with 53 bits of precision.
  double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

  float uniform(float lo, float hi) {
    return lo + static_cast<float>(next_double()) * (hi - lo);
  }

  /// Box-Muller; one spare value is cached between calls.
  float normal(float mean, float std) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + std * spare_;
    }
    const double u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = static_cast<float>(r * std::sin(theta));
    has_spare_ = true;
    return mean + std * static_cast<float>(r * std::cos(theta));
  }

  /// Independently seeded generator for a parallel consumer.
  Rng fork() { return Rng(next_u64()); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  float spare_ = 0.0f;
  bool has_spare_ = false;
};

}  // namespace bnn
