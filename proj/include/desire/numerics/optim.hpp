#pragma once

#include <span>
#include <vector>

#include "desire/numerics/types.hpp"

namespace desire {

/// Heavy-ball SGD: v <- m*v + g; p <- p - lr*v.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum);

  /// Applies one update. All gradients are validated before any parameter is
  /// touched, so a non-finite gradient leaves the parameters unchanged.
  void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads);

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double lr);
  double momentum() const { return momentum_; }
  const std::vector<Matrix>& velocity() const { return velocity_; }

 private:
  double learning_rate_;
  double momentum_;
  std::vector<Matrix> velocity_;
};

/// base_lr * (1 + cos(pi * epoch / total_epochs)) / 2
double cosine_anneal_lr(int epoch, int total_epochs, double base_lr);

}  // namespace desire
