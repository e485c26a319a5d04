#pragma once

#include <cstdint>
#include <vector>

#include "desire/backbone.hpp"
#include "desire/stats.hpp"

namespace desire {

struct RefinementConfig {
  int epochs = 10;
  double learning_rate = 5e-3;
  double momentum = 0.9;
  int batch_size = 64;
  /// Pseudo-features drawn per seen class.
  int pseudo_count = 200;

  void validate() const;
  bool operator==(const RefinementConfig&) const = default;
};

struct PseudoFeatureBatch {
  Matrix features;  // (C * N) x d, class-major
  std::vector<int> labels;
};

/// z = mu + L eps per class, L the Cholesky factor of the conditioned covariance.
PseudoFeatureBatch sample_pseudo_features(const StatsStore& store, int per_class, std::uint64_t seed);

/// Cross-entropy over every row of the head, trained on the pseudo-features.
/// Throws ConsistencyError for labels the classifier does not know.
Classifier refine_classifier(const Classifier& classifier, const PseudoFeatureBatch& batch,
                             const RefinementConfig& config, std::uint64_t seed);

}  // namespace desire
