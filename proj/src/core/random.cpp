// SPDX-License-Identifier: Apache-2.0
#include "capstare/random.hpp"

#include <cmath>
#include <numbers>

#include "capstare/errors.hpp"

namespace capstare {

const char* category_name(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::internal: return "internal";
    case ErrorCategory::config: return "config";
    case ErrorCategory::data: return "data";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::format: return "format";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::contract: return "contract";
  }
  return "internal";
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t RandomSource::mix(std::uint64_t seed, std::string_view label) {
  // FNV-1a over the label, then folded into the seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed) ^ h);
}

std::uint64_t RandomSource::mix(std::uint64_t seed, std::uint64_t value) {
  return splitmix64(splitmix64(seed) ^ splitmix64(value + 0x632be59bd9b4e019ULL));
}

double RandomSource::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double RandomSource::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t RandomSource::below(std::uint64_t n) {
  if (n == 0) throw ContractError("RandomSource::below: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

}  // namespace capstare
