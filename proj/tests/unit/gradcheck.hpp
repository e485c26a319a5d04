#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "desire/numerics/autodiff.hpp"

namespace desire::test_support {

/// Builds a scalar loss on a fresh tape from the given leaf variables.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Compares tape gradients with central finite differences of the forward
/// value. Relative error uses max(|analytic|, |numeric|, floor) as scale.
inline GradCheckResult gradcheck(const LossBuilder& build, const std::vector<Matrix>& inputs, double h = 1e-5,
                                 double floor = 1e-6) {
  auto evaluate = [&](const std::vector<Matrix>& values) {
    Tape tape;
    std::vector<Var> vars;
    for (const Matrix& v : values) vars.push_back(tape.constant(v));
    return build(tape, vars).value()(0, 0);
  };

  Tape tape;
  std::vector<Var> vars;
  for (const Matrix& v : inputs) vars.push_back(tape.variable(v));
  const Var loss = build(tape, vars);
  tape.backward(loss);

  GradCheckResult result;
  std::vector<Matrix> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix analytic = tape.grad(vars[i]);
    for (Index j = 0; j < inputs[i].size(); ++j) {
      const double saved = probe[i].data()[j];
      probe[i].data()[j] = saved + h;
      const double up = evaluate(probe);
      probe[i].data()[j] = saved - h;
      const double down = evaluate(probe);
      probe[i].data()[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.data()[j];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      result.max_rel_error = std::max(result.max_rel_error, rel);
    }
  }
  return result;
}

}  // namespace desire::test_support
