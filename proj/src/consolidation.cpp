#include "desire/consolidation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "desire/numerics/optim.hpp"
#include "desire/numerics/rng.hpp"

namespace desire {

void ConsolidationConfig::validate() const {
  if (epochs < 0) throw ConfigError("consolidation: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("consolidation: batch_size must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("consolidation: temperature must be > 0");
  if (!(learning_rate > 0.0)) throw ConfigError("consolidation: learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("consolidation: momentum must be in [0, 1)");
  if (merge_dataset_size < batch_size) {
    throw ConfigError("consolidation: merge_dataset_size " + std::to_string(merge_dataset_size) +
                      " is smaller than batch_size " + std::to_string(batch_size));
  }
  if (!std::isfinite(lambda_prev_init) || !std::isfinite(lambda_curr_init)) {
    throw ConfigError("consolidation: lambda initialization must be finite");
  }
}

MergeDataset sample_merge_dataset(std::span<const Matrix> pools, int size, std::uint64_t seed) {
  if (size < 1) throw ConfigError("merge dataset: size must be >= 1");
  Index total = 0;
  Index dim = -1;
  for (const Matrix& p : pools) {
    if (p.rows() == 0) continue;
    if (dim >= 0 && p.cols() != dim) throw DimensionError("merge dataset: pools differ in width");
    dim = p.cols();
    total += p.rows();
  }
  if (total == 0) throw ConfigError("merge dataset: all pools are empty");

  // Flat index -> (pool, row).
  auto fetch = [&](Index flat) {
    for (const Matrix& p : pools) {
      if (flat < p.rows()) return p.row(flat);
      flat -= p.rows();
    }
    throw IndexError("merge dataset: index out of range");
  };

  SeededRng rng(seed);
  MergeDataset out;
  out.seed = seed;
  out.inputs.resize(size, dim);
  if (size <= total) {
    std::vector<Index> order(static_cast<std::size_t>(total));
    std::iota(order.begin(), order.end(), Index{0});
    rng.shuffle(order);
    for (int i = 0; i < size; ++i) out.inputs.row(i) = fetch(order[static_cast<std::size_t>(i)]);
  } else {
    spdlog::warn("merge dataset: {} requested but only {} pooled inputs; sampling with replacement", size, total);
    out.with_replacement = true;
    for (int i = 0; i < size; ++i) out.inputs.row(i) = fetch(static_cast<Index>(rng.uniform_index(total)));
  }
  return out;
}

namespace {

void check_problem(const MergeProblem& p) {
  if (!p.weights || !p.backbone || !p.previous || !p.current || !p.store) {
    throw ConfigError("attribution loss: incomplete merge problem");
  }
  if (p.store->size() < 2) throw ConfigError("attribution loss: needs statistics for at least 2 classes");
  if (!(p.temperature > 0.0)) throw ConfigError("attribution loss: temperature must be > 0");
}

}  // namespace

AttributionLoss attribution_loss(Tape& tape, const MergeProblem& problem, const Matrix& batch,
                                 std::span<const Var> coeffs) {
  check_problem(problem);
  const BoundBackbone net = bind_constant(tape, *problem.weights);
  const std::vector<Var> deltas = merged_site_deltas(tape, *problem.previous, *problem.current, coeffs);
  const Var z = forward_features(tape, net, *problem.backbone, batch, deltas);
  std::vector<bool> degenerate;
  const Var normalized = minmax_normalize_rows(surrogate_logits(z, *problem.store), &degenerate);

  std::vector<Index> keep;
  for (std::size_t r = 0; r < degenerate.size(); ++r) {
    if (!degenerate[r]) keep.push_back(static_cast<Index>(r));
  }
  AttributionLoss out;
  out.used = static_cast<int>(keep.size());
  out.skipped = static_cast<int>(degenerate.size() - keep.size());
  if (keep.empty()) return out;
  out.loss = mean(softmax_entropy_rows(scale(select_rows(normalized, keep), 1.0 / problem.temperature)));
  return out;
}

namespace {

std::vector<Var> bind_coefficients(Tape& tape, const MergeCoefficients& c, bool trainable) {
  std::vector<Var> vars;
  for (double v : c.values()) {
    Matrix m(1, 1);
    m(0, 0) = v;
    vars.push_back(trainable ? tape.variable(std::move(m)) : tape.constant(std::move(m)));
  }
  return vars;
}

}  // namespace

double attribution_loss_value(const MergeProblem& problem, const Matrix& inputs, const MergeCoefficients& coeffs,
                              int chunk) {
  double total = 0.0;
  int used = 0;
  for (Index start = 0; start < inputs.rows(); start += chunk) {
    const Index n = std::min<Index>(chunk, inputs.rows() - start);
    Tape tape;
    const auto vars = bind_coefficients(tape, coeffs, false);
    const AttributionLoss l = attribution_loss(tape, problem, inputs.middleRows(start, n), vars);
    if (l.used == 0) continue;
    total += l.loss.value()(0, 0) * l.used;
    used += l.used;
  }
  return used == 0 ? 0.0 : total / used;
}

CoefficientFit optimize_coefficients(const MergeProblem& problem, const MergeDataset& merge_set,
                                     const ConsolidationConfig& config, std::uint64_t seed) {
  config.validate();
  check_problem(problem);
  const int blocks = problem.previous->num_blocks();
  CoefficientFit fit;
  fit.coefficients = MergeCoefficients::uniform(blocks, config.lambda_prev_init, config.lambda_curr_init);
  fit.initial_loss = attribution_loss_value(problem, merge_set.inputs, fit.coefficients);
  if (config.epochs == 0) {
    fit.final_loss = fit.initial_loss;
    return fit;
  }

  const std::size_t n = static_cast<std::size_t>(merge_set.inputs.rows());
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  SeededRng rng(seed);
  SgdMomentum opt(config.learning_rate, config.momentum);

  // The optimizer steps 1x1 matrices that mirror the coefficient values.
  std::vector<Matrix> params;
  for (double v : fit.coefficients.values()) params.push_back(Matrix::Constant(1, 1, v));
  std::vector<Matrix*> param_ptrs;
  for (Matrix& p : params) param_ptrs.push_back(&p);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(config.batch_size));
      Matrix batch(static_cast<Index>(end - start), merge_set.inputs.cols());
      for (std::size_t i = start; i < end; ++i) batch.row(static_cast<Index>(i - start)) = merge_set.inputs.row(order[i]);

      const MergeCoefficients last_good = fit.coefficients;
      try {
        Tape tape;
        const auto vars = bind_coefficients(tape, fit.coefficients, true);
        const AttributionLoss l = attribution_loss(tape, problem, batch, vars);
        fit.skipped_items += l.skipped;
        if (l.used == 0) continue;
        tape.backward(l.loss);
        std::vector<const Matrix*> grads;
        for (const Var& v : vars) grads.push_back(&tape.grad(v));
        opt.step(param_ptrs, grads);
        for (std::size_t i = 0; i < params.size(); ++i) fit.coefficients.values()[i] = params[i](0, 0);
        fit.coefficients.validate(blocks);
        epoch_sum += l.loss.value()(0, 0);
        ++batches;
      } catch (const NumericError& e) {
        throw CoefficientDivergence(std::string("merge coefficients diverged at epoch ") + std::to_string(epoch) +
                                        ": " + e.what(),
                                    last_good);
      }
    }
    fit.epoch_losses.push_back(batches ? epoch_sum / batches : 0.0);
  }
  fit.final_loss = attribution_loss_value(problem, merge_set.inputs, fit.coefficients);
  if (!std::isfinite(fit.final_loss)) throw CoefficientDivergence("merge coefficients: final loss is not finite", fit.coefficients);
  return fit;
}

LoraSet consolidate(const LoraSet& previous, const LoraSet& current, const MergeCoefficients& coeffs) {
  return merge_sets(previous, current, coeffs);
}

}  // namespace desire
