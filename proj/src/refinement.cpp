#include "desire/refinement.hpp"

#include <numeric>

#include "desire/numerics/optim.hpp"
#include "desire/numerics/rng.hpp"

namespace desire {

void RefinementConfig::validate() const {
  if (epochs < 0) throw ConfigError("refinement: epochs must be >= 0");
  if (pseudo_count < 1) throw ConfigError("refinement: pseudo_count must be >= 1");
  if (batch_size < 1) throw ConfigError("refinement: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("refinement: learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("refinement: momentum must be in [0, 1)");
}

PseudoFeatureBatch sample_pseudo_features(const StatsStore& store, int per_class, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("pseudo features: per-class count must be >= 1");
  if (store.empty()) throw ConsistencyError("pseudo features: empty statistics store");
  const SeededRng root(seed);
  const Index d = store.dim();
  PseudoFeatureBatch out;
  out.features.resize(static_cast<Index>(store.size()) * per_class, d);
  Index row = 0;
  for (const auto& [id, s] : store) {
    // One stream per class keeps a class's draws independent of the others.
    SeededRng rng = root.fork(static_cast<std::uint64_t>(id));
    const Matrix eps = rng.normal_matrix(per_class, d);
    out.features.middleRows(row, per_class) =
        (eps * s.lower.transpose()).rowwise() + s.mu.transpose();
    out.labels.insert(out.labels.end(), static_cast<std::size_t>(per_class), id);
    row += per_class;
  }
  return out;
}

Classifier refine_classifier(const Classifier& classifier, const PseudoFeatureBatch& batch,
                             const RefinementConfig& config, std::uint64_t seed) {
  config.validate();
  if (batch.features.rows() != static_cast<Index>(batch.labels.size())) {
    throw DimensionError("refine: feature rows and labels differ");
  }
  if (batch.features.cols() != classifier.feature_dim()) throw DimensionError("refine: feature width mismatch");
  std::vector<int> rows;
  rows.reserve(batch.labels.size());
  for (int id : batch.labels) rows.push_back(static_cast<int>(classifier.row_of(id)));

  Classifier out = classifier;
  if (config.epochs == 0 || rows.empty()) return out;

  SgdMomentum opt(config.learning_rate, config.momentum);
  SeededRng rng(seed);
  std::vector<Index> order(rows.size());
  std::iota(order.begin(), order.end(), Index{0});
  Matrix* params[] = {&out.weight, &out.bias};
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      Matrix x(static_cast<Index>(end - start), batch.features.cols());
      std::vector<int> y;
      for (std::size_t i = start; i < end; ++i) {
        x.row(static_cast<Index>(i - start)) = batch.features.row(order[i]);
        y.push_back(rows[static_cast<std::size_t>(order[i])]);
      }
      Tape tape;
      const Var w = tape.variable(out.weight);
      const Var b = tape.variable(out.bias);
      const Var loss = cross_entropy(add_row(matmul_transposed(tape.constant(std::move(x)), w), b), y);
      tape.backward(loss);
      const Matrix* grads[] = {&tape.grad(w), &tape.grad(b)};
      opt.step(params, grads);
    }
  }
  return out;
}

}  // namespace desire
