#include <cmath>
#include <cstdio>
#include <numbers>

#include "desire/errors.hpp"
#include "desire/numerics/rng.hpp"
#include "desire/numerics/types.hpp"

namespace desire {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kRange: return "range error";
    case ErrorKind::kDecomposition: return "decomposition error";
    case ErrorKind::kConditioning: return "conditioning error";
    case ErrorKind::kInsufficientSamples: return "insufficient samples";
    case ErrorKind::kConfiguration: return "configuration error";
    case ErrorKind::kConsistency: return "consistency error";
    case ErrorKind::kLeakage: return "leakage error";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kIo: return "I/O error";
  }
  return "error";
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t hash = seed;
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

// ---------------------------------------------------------------------------

std::uint64_t SeededRng::derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

SeededRng SeededRng::fork(std::string_view label) const {
  return fork(fnv1a(label.data(), label.size()));
}

double SeededRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t SeededRng::uniform_index(std::uint64_t n) {
  if (n == 0) throw RangeError("uniform_index: empty range");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t draw = 0;
  do {
    draw = engine_();
  } while (draw >= limit);
  return draw % n;
}

Matrix SeededRng::normal_matrix(Index rows, Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal();
  return m;
}

}  // namespace desire
