#pragma once

#include <cmath>
#include <utility>

#include <Eigen/Cholesky>

#include "desire/numerics/types.hpp"

namespace desire {

/// Lower-triangular L with L * L^T == s. Throws DecompositionError when s is
/// not symmetric positive definite.
template <typename Derived>
MatrixX<typename Derived::Scalar> cholesky(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  if (s.rows() != s.cols()) throw DimensionError("cholesky: matrix is " + shape_string(s));
  require_finite(s, "cholesky");
  const MatrixX<Scalar> dense = s;
  Eigen::LLT<MatrixX<Scalar>> llt(dense);
  if (llt.info() != Eigen::Success) throw DecompositionError("cholesky: matrix is not positive definite");
  const MatrixX<Scalar> lower = llt.matrixL();
  if (!lower.allFinite() || (lower.diagonal().array() <= Scalar(0)).any()) {
    throw DecompositionError("cholesky: matrix is not positive definite");
  }
  return lower;
}

/// log|S| from a Cholesky factor.
template <typename Derived>
typename Derived::Scalar log_det_from_cholesky(const Eigen::MatrixBase<Derived>& lower) {
  return typename Derived::Scalar(2) * lower.diagonal().array().log().sum();
}

/// Returns (S^-1 y, log|S|) for SPD S.
template <typename DerivedS, typename DerivedY>
std::pair<VectorX<typename DerivedS::Scalar>, typename DerivedS::Scalar> spd_solve_and_logdet(
    const Eigen::MatrixBase<DerivedS>& s, const Eigen::MatrixBase<DerivedY>& y) {
  using Scalar = typename DerivedS::Scalar;
  if (y.size() != s.rows()) {
    throw DimensionError("spd_solve_and_logdet: rhs of size " + std::to_string(y.size()) + " for " +
                         shape_string(s));
  }
  const MatrixX<Scalar> lower = cholesky(s);
  const auto tri = lower.template triangularView<Eigen::Lower>();
  VectorX<Scalar> x = y.reshaped();
  tri.solveInPlace(x);
  tri.transpose().solveInPlace(x);
  return {x, log_det_from_cholesky(lower)};
}

}  // namespace desire
