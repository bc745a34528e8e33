// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace capstare {

/// Seeded random stream.
///
/// Uniform bits come from std::mt19937_64, whose output sequence is fixed by
/// the C++ standard. Doubles in [0,1) take the top 53 bits of one draw.
/// Normal samples use the Box-Muller transform on two uniforms, returning the
/// cosine branch first and the cached sine branch on the next call. None of
/// the std::*_distribution templates are used, so streams are identical on
/// every conforming platform.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform();

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal();

  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  /// Child stream keyed by a label, independent of how much of this stream
  /// has been consumed.
  RandomSource derive(std::string_view label) const { return RandomSource(mix(seed_, label)); }

  static std::uint64_t mix(std::uint64_t seed, std::string_view label);
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t value);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x) noexcept;

}  // namespace capstare
