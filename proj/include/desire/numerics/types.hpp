#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

#include "desire/errors.hpp"

namespace desire {

// Row-major storage so that data() is the serialized order.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using RowVector = RowVectorX<double>;
using Index = Eigen::Index;

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

/// FNV-1a over raw bytes; used for checksums and config hashes.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

template <typename Derived>
std::uint64_t checksum(const Eigen::MatrixBase<Derived>& m, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  const MatrixX<typename Derived::Scalar> dense = m;
  return fnv1a(dense.data(), sizeof(typename Derived::Scalar) * static_cast<std::size_t>(dense.size()), seed);
}

std::string hex64(std::uint64_t value);

}  // namespace desire
