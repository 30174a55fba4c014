#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include "calibrl/common.hpp"

// Counter-based deterministic randomness.  Every consumer derives its own
// Stream from a (seed, purpose, index...) key, so results never depend on
// the order in which unrelated components draw numbers.  std:: distributions
// are avoided on purpose: their output is implementation-defined and would
// break byte-identical artifacts across toolchains.

namespace calibrl::rng {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

/// splitmix64 finalizer: bijective 64-bit mix.
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Order-sensitive key combiner (hash_combine style, then finalized).
inline std::uint64_t combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (b + kGolden + (a << 6) + (a >> 2)));
}

/// FNV-1a for strings; std::hash is implementation-defined and would leak
/// toolchain differences into otherwise reproducible artifacts.
inline std::uint64_t hash_str(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Stateless-by-construction RNG: value i of a stream is a pure function of
/// (key, i).  next() walks the counter.
class Stream {
 public:
  explicit Stream(std::uint64_t key) : key_(key) {}

  static Stream keyed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t k = 0x6A09E667F3BCC908ull;  // arbitrary fixed basis
    for (std::uint64_t p : parts) k = combine(k, p);
    return Stream(k);
  }

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }

  /// Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; generates pairs, caches the spare.
  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    // log(1 - u1) keeps the argument in (0, 1]; u1 == 0 is fine.
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Inverse-CDF draw from an explicit probability vector.  Probabilities
  /// must be nonnegative; they are normalized by their own sum.
  int next_categorical(std::span<const double> probs) {
    require(!probs.empty(), "next_categorical: empty probability vector");
    double total = 0.0;
    for (double p : probs) {
      require(p >= 0.0 && std::isfinite(p),
              "next_categorical: probabilities must be finite and >= 0");
      total += p;
    }
    require(total > 0.0, "next_categorical: probabilities sum to zero");
    double u = next_double() * total;
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;  // u landed on rounding slack
  }

  /// Uniform integer in [0, n).
  int next_below(int n) {
    require(n > 0, "next_below: n must be positive");
    // Rejection-free multiply-shift; bias is < 2^-53 for the n used here.
    return static_cast<int>(next_double() * n);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace calibrl::rng
