// SPDX-License-Identifier: Apache-2.0
// Deterministic random source: xoshiro256** seeded via splitmix64, with
// Box-Muller normal draws. The full state round-trips through checkpoints,
// so a restored run consumes the stream exactly where it left off.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "diffpoint/error.hpp"

namespace diffpoint {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : state_) {
      sm += 0x9E3779B97F4A7C15ull;
      std::uint64_t z = sm;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      word = z ^ (z >> 31);
    }
  }

  // Independent stream for a derived purpose (per-record generation, eval sampling).
  SeededRng derive(std::uint64_t stream_id) const {
    return SeededRng(splitmix64(seed_ ^ splitmix64(stream_id + 0x51ED2701A9B5D9E3ull)));
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform double in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ContractError("SeededRng::next_below: n must be positive");
    const std::uint64_t limit = ~0ull - ~0ull % n;
    std::uint64_t draw;
    do {
      draw = next_u64();
    } while (draw >= limit);
    return draw % n;
  }

  int randint(int n) { return static_cast<int>(next_below(static_cast<std::uint64_t>(n))); }

  // Standard normal via Box-Muller; the sine mate is cached and served next.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * uniform();
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // --- state access for checkpoint serialization ---
  std::uint64_t seed() const { return seed_; }
  const std::array<std::uint64_t, 4>& state() const { return state_; }
  bool has_spare() const { return has_spare_; }
  double spare() const { return spare_; }
  void restore(std::uint64_t seed, const std::array<std::uint64_t, 4>& state, bool has_spare,
               double spare) {
    seed_ = seed;
    state_ = state;
    has_spare_ = has_spare;
    spare_ = spare;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace diffpoint
