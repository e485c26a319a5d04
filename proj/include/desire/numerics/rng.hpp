#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

#include "desire/numerics/types.hpp"

namespace desire {

/// Deterministic random source. Only the raw mt19937_64 stream (which the
/// standard pins bit-for-bit) is used; every distribution is derived here so
/// the sequence does not depend on the standard library vendor.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();

  /// Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  std::uint64_t uniform_index(std::uint64_t n);

  Matrix normal_matrix(Index rows, Index cols, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  /// Independent child stream; the parent state is not consumed.
  SeededRng fork(std::uint64_t stream) const { return SeededRng(derive_seed(seed_, stream)); }
  SeededRng fork(std::string_view label) const;

  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace desire
