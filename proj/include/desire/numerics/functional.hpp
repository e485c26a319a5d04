#pragma once

#include <cmath>
#include <vector>

#include "desire/numerics/types.hpp"

namespace desire {

/// log(softmax(v)) computed with the max shift.
template <typename Derived>
VectorX<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const VectorX<Scalar> x = v.reshaped();
  const Scalar shift = x.maxCoeff();
  const Scalar log_norm = std::log((x.array() - shift).exp().sum()) + shift;
  return (x.array() - log_norm).matrix();
}

template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  return log_softmax(v).array().exp().matrix();
}

/// Shannon entropy in nats of softmax(logits).
template <typename Derived>
typename Derived::Scalar shannon_entropy(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw DimensionError("shannon_entropy: empty logits");
  require_finite(logits, "shannon_entropy");
  const VectorX<Scalar> log_p = log_softmax(logits);
  return -(log_p.array().exp() * log_p.array()).sum();
}

template <typename Scalar>
struct MinMaxResult {
  VectorX<Scalar> values;
  bool degenerate = false;
};

/// Affine map of v onto [0, 1]. Constant input maps to zeros with the
/// degenerate flag set.
template <typename Derived>
MinMaxResult<typename Derived::Scalar> minmax_normalize(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() < 2) throw DimensionError("minmax_normalize: need at least 2 entries");
  require_finite(v, "minmax_normalize");
  const VectorX<Scalar> x = v.reshaped();
  const Scalar lo = x.minCoeff();
  const Scalar hi = x.maxCoeff();
  MinMaxResult<Scalar> out;
  if (hi == lo) {
    out.values = VectorX<Scalar>::Zero(x.size());
    out.degenerate = true;
    return out;
  }
  out.values = ((x.array() - lo) / (hi - lo)).matrix();
  return out;
}

/// Mean over rows of -log softmax(logits_row)[label].
template <typename Derived>
typename Derived::Scalar cross_entropy(const Eigen::MatrixBase<Derived>& logits,
                                       const std::vector<int>& labels) {
  using Scalar = typename Derived::Scalar;
  if (logits.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.rows()) + " rows");
  }
  require_finite(logits, "cross_entropy");
  Scalar total = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= logits.cols()) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                       std::to_string(logits.cols()) + ")");
    }
    total -= log_softmax(logits.row(r))(label);
  }
  return total / static_cast<Scalar>(logits.rows());
}

}  // namespace desire
