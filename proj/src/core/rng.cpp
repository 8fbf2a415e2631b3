// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/core/rng.hpp"

#include <cmath>
#include <numbers>

namespace vfmseg {

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t limit = n * ((~0ull) / n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u;
  do {
    u = uniform();
  } while (u <= 0.0);
  const double v = uniform();
  return std::sqrt(-2.0 * std::log(u)) *
         std::cos(2.0 * std::numbers::pi * v);
}

double Rng::trunc_normal(double stddev, double clip) {
  for (;;) {
    const double z = normal();
    if (std::abs(z) <= clip) return z * stddev;
  }
}

std::uint64_t Rng::derive(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9e3779b97f4a7c15ull;
  for (std::uint64_t p : parts) {
    h ^= p + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    Rng mix(h);
    h = mix.next_u64();
  }
  return h;
}

std::uint64_t Rng::hash_str(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace vfmseg
