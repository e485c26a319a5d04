#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "desire/numerics/autodiff.hpp"

namespace desire {

/// Result of conditioning a covariance: sigma + eps * I with its Cholesky factor.
struct ShrunkCovariance {
  Matrix conditioned;
  Matrix lower;
  double eps = 0.0;
};

/// Tries eps = 10^(k-6) * trace(sigma)/d for k = 0..5 (base 1 when the trace is
/// not positive) and returns the first that factors. The first entry is applied
/// even when sigma is already SPD. Throws ConditioningError if none works.
ShrunkCovariance shrink_covariance(const Matrix& sigma);

struct ClassStats {
  int class_id = -1;
  Vector mu;
  /// Unbiased sample covariance, before conditioning.
  Matrix sigma;
  int count = 0;
  double shrinkage_eps = 0.0;
  /// Cholesky factor of sigma + shrinkage_eps * I, and its log-determinant.
  Matrix lower;
  double log_det = 0.0;

  Index dim() const { return mu.size(); }
  Matrix conditioned() const { return sigma + shrinkage_eps * Matrix::Identity(dim(), dim()); }
};

/// Rows are samples of one class. Throws InsufficientSamplesError below 2 rows.
ClassStats compute_class_stats(const Matrix& features, int class_id);

/// Rebuilds a ClassStats from stored parts, re-factoring with the recorded eps.
ClassStats restore_class_stats(int class_id, int count, double eps, Vector mu, Matrix sigma);

/// log N(z; mu, sigma + eps I).
double gaussian_log_density(const Vector& z, const ClassStats& stats);

/// Append-only map from class id to statistics, iterated in ascending id.
class StatsStore {
 public:
  /// Throws ConsistencyError if the class is already present.
  void add(ClassStats stats);
  bool contains(int class_id) const { return stats_.contains(class_id); }
  const ClassStats& at(int class_id) const;
  std::size_t size() const { return stats_.size(); }
  bool empty() const { return stats_.empty(); }
  std::vector<int> class_ids() const;
  Index dim() const { return stats_.empty() ? 0 : stats_.begin()->second.dim(); }

  auto begin() const { return stats_.begin(); }
  auto end() const { return stats_.end(); }

 private:
  std::map<int, ClassStats> stats_;
};

/// Row-wise log densities of z (n x d) under each class, n x C in ascending
/// class id. Differentiable in z; the statistics are constants and the store
/// must outlive the backward pass.
Var surrogate_logits(Var z, const StatsStore& store);
Matrix surrogate_logits(const Matrix& z, const StatsStore& store);

/// "DSRS": magic, u32 count, u32 d, then per class u32 id, u32 N, f64 eps,
/// mu and sigma as f64.
std::vector<unsigned char> encode_stats(const StatsStore& store);
StatsStore decode_stats(std::vector<unsigned char> bytes);
void save_stats(const std::filesystem::path& path, const StatsStore& store);
StatsStore load_stats(const std::filesystem::path& path);

}  // namespace desire
