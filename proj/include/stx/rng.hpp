#pragma once

// Counter-based pseudo-random stream. Every stochastic component takes an
// explicit RngStream so runs are reproducible and masks can be frozen by
// resetting the counter. The generator is a splitmix64 finalizer applied to
// (seed, counter), so identical (seed, counter) pairs give identical draws
// on every platform.

#include <cmath>
#include <cstdint>

#include "stx/error.hpp"

namespace stx {

class RngStream {
 public:
  static constexpr const char* kAlgorithm = "splitmix64-counter";

  explicit RngStream(std::uint64_t seed) : seed_(seed) {}

  // Derives an independent stream; distinct keys give unrelated sequences.
  RngStream split(std::uint64_t key) const {
    return RngStream(mix(seed_ ^ 0x7F4A7C15F39CC060ull, key));
  }

  std::uint64_t next_u64() { return mix(seed_, counter_++); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) {
    if (p < 0.0 || p > 1.0) throw ContractError("bernoulli: p must be in [0,1]");
    return uniform() < p;
  }

  // Box-Muller, two fresh uniforms per call (nothing cached between calls).
  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void seek(std::uint64_t counter) { counter_ = counter; }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t counter) {
    std::uint64_t z = seed + (counter + 1) * 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace stx
