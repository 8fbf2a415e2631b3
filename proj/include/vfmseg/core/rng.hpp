// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace vfmseg {

/// Deterministic splittable generator (splitmix64 core). Every random
/// decision in the project flows through this type so that runs are
/// reproducible bit-for-bit across platforms and worker layouts: streams are
/// derived from (seed, purpose, ids...) rather than drawn from one shared
/// sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) with 53 bits of precision.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Standard normal via Box-Muller (cosine branch only).
  double normal();

  /// Normal(0, stddev) truncated to +/- clip*stddev by resampling.
  double trunc_normal(double stddev, double clip = 2.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j =
          static_cast<std::size_t>(uniform_int(static_cast<std::uint64_t>(i) + 1));
      std::swap(v[i], v[j]);
    }
  }

  /// Hash-combines parts into a fresh stream seed. Order-sensitive.
  static std::uint64_t derive(std::initializer_list<std::uint64_t> parts);

  /// FNV-1a over a string, for purpose tags and tile ids.
  static std::uint64_t hash_str(std::string_view s);

 private:
  std::uint64_t state_;
};

}  // namespace vfmseg
