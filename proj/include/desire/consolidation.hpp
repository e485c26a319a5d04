#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "desire/backbone.hpp"
#include "desire/lora.hpp"
#include "desire/stats.hpp"

namespace desire {

struct ConsolidationConfig {
  int epochs = 5;
  double learning_rate = 0.1;
  double momentum = 0.9;
  int batch_size = 64;
  /// kappa: divides the min-max normalized surrogate logits before the softmax.
  double temperature = 0.1;
  double lambda_prev_init = 0.5;
  double lambda_curr_init = 0.5;
  int merge_dataset_size = 100;
  /// Draw the merge set from held-out train inputs instead of the test split.
  bool merge_from_train = false;

  void validate() const;
  bool operator==(const ConsolidationConfig&) const = default;
};

/// Unlabeled inputs used to fit the merge coefficients.
struct MergeDataset {
  Matrix inputs;
  std::uint64_t seed = 0;
  bool with_replacement = false;
};

/// Uniform draw without replacement across the union of the pools; falls back
/// to drawing with replacement (and warns) when the pools are too small.
MergeDataset sample_merge_dataset(std::span<const Matrix> pools, int size, std::uint64_t seed);

/// Everything the attribution loss needs besides the coefficients.
struct MergeProblem {
  const BackboneWeights* weights = nullptr;
  const BackboneConfig* backbone = nullptr;
  const LoraSet* previous = nullptr;
  const LoraSet* current = nullptr;
  const StatsStore* store = nullptr;
  double temperature = 0.1;
};

struct AttributionLoss {
  Var loss;  // 1x1; invalid when every item was degenerate
  int used = 0;
  int skipped = 0;
};

/// Mean entropy of softmax(minmax(surrogate logits) / kappa) over the batch,
/// with the features computed under the merged adapters. Items whose logits
/// are all equal are skipped. Only `coeffs` can carry gradient; the classifier
/// is never consulted.
AttributionLoss attribution_loss(Tape& tape, const MergeProblem& problem, const Matrix& batch,
                                 std::span<const Var> coeffs);
/// Plain evaluation over `inputs` in chunks; 0 if every item was degenerate.
double attribution_loss_value(const MergeProblem& problem, const Matrix& inputs, const MergeCoefficients& coeffs,
                              int chunk = 256);

/// Raised when the loss goes non-finite; carries the coefficients from the
/// last step that was still finite.
class CoefficientDivergence : public NumericError {
 public:
  CoefficientDivergence(const std::string& what, MergeCoefficients last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const MergeCoefficients& last_good() const { return last_good_; }

 private:
  MergeCoefficients last_good_;
};

struct CoefficientFit {
  MergeCoefficients coefficients;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  int skipped_items = 0;
};

/// SGD with momentum over the 8l coefficients, starting from the configured
/// (prev, curr) initialization. Zero epochs return the initialization.
CoefficientFit optimize_coefficients(const MergeProblem& problem, const MergeDataset& merge_set,
                                     const ConsolidationConfig& config, std::uint64_t seed);

/// Folds current into previous; the result is the new previous set.
LoraSet consolidate(const LoraSet& previous, const LoraSet& current, const MergeCoefficients& coeffs);

}  // namespace desire
