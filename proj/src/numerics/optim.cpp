#include "desire/numerics/optim.hpp"

#include <cmath>
#include <numbers>

namespace desire {

SgdMomentum::SgdMomentum(double learning_rate, double momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("sgd: learning rate must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("sgd: momentum must be in [0, 1)");
}

void SgdMomentum::set_learning_rate(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("sgd: learning rate must be non-negative");
  learning_rate_ = lr;
}

void SgdMomentum::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
  if (params.size() != grads.size()) {
    throw DimensionError("sgd: " + std::to_string(params.size()) + " params but " +
                         std::to_string(grads.size()) + " grads");
  }
  if (!velocity_.empty() && velocity_.size() != params.size()) {
    throw DimensionError("sgd: parameter count changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i]->rows() || params[i]->cols() != grads[i]->cols()) {
      throw DimensionError("sgd: grad " + shape_string(*grads[i]) + " for param " + shape_string(*params[i]));
    }
    if (!velocity_.empty() &&
        (velocity_[i].rows() != params[i]->rows() || velocity_[i].cols() != params[i]->cols())) {
      throw DimensionError("sgd: velocity buffer shape mismatch");
    }
    if (!grads[i]->allFinite()) throw NumericError("sgd: non-finite gradient, step aborted");
  }
  if (velocity_.empty()) {
    velocity_.reserve(params.size());
    for (const Matrix* p : params) velocity_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity_[i] = momentum_ * velocity_[i] + *grads[i];
    *params[i] -= learning_rate_ * velocity_[i];
  }
}

double cosine_anneal_lr(int epoch, int total_epochs, double base_lr) {
  if (total_epochs <= 0 || epoch < 0 || epoch >= total_epochs) {
    throw RangeError("cosine_anneal_lr: epoch " + std::to_string(epoch) + " outside [0," +
                     std::to_string(total_epochs) + ")");
  }
  const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base_lr * (1.0 + std::cos(phase)) / 2.0;
}

}  // namespace desire
